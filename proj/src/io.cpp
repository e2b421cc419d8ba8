#include "twophase/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "twophase/errors.hpp"

namespace twophase::io {

namespace {

std::string strip(const std::string& text) {
  const auto begin = text.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = text.find_last_not_of(" \t\r\n");
  return text.substr(begin, end - begin + 1);
}

std::vector<std::string> split_csv_line(const std::string& line, long row,
                                        const std::string& path) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          current.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        current.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(current);
      current.clear();
    } else if (c != '\r') {
      current.push_back(c);
    }
  }
  if (quoted)
    throw DataError(path + ": row " + std::to_string(row) + ": unterminated quote");
  fields.push_back(current);
  return fields;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

}  // namespace

double parse_double(const std::string& text, const std::string& context) {
  const std::string t = strip(text);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size())
    throw DataError(context + ": expected a number, got '" + text + "'");
  return value;
}

long parse_long(const std::string& text, const std::string& context) {
  const std::string t = strip(text);
  long value = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size())
    throw DataError(context + ": expected an integer, got '" + text + "'");
  return value;
}

bool parse_bool(const std::string& text, const std::string& context) {
  const std::string t = strip(text);
  if (t == "1" || t == "true" || t == "yes") return true;
  if (t == "0" || t == "false" || t == "no") return false;
  throw DataError(context + ": expected a boolean, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string item = strip(text.substr(pos, comma - pos));
    if (!item.empty()) out.push_back(item);
    pos = comma + 1;
  }
  return out;
}

void ColumnMapping::check_valid() const {
  std::vector<std::string> names{time_column, event_column};
  names.insert(names.end(), surrogate_columns.begin(), surrogate_columns.end());
  names.insert(names.end(), covariate_columns.begin(), covariate_columns.end());
  if (validated_flag_column) names.push_back(*validated_flag_column);
  std::set<std::string> seen;
  for (const auto& name : names) {
    if (name.empty()) throw ArgumentError("column mapping contains an empty name");
    if (!seen.insert(name).second)
      throw ArgumentError("column '" + name + "' referenced twice in the mapping");
  }
  if (surrogate_columns.empty()) throw ArgumentError("at least one surrogate column is required");
  if (covariate_columns.empty()) throw ArgumentError("at least one covariate column is required");
}

void DiscretizationSpec::check_valid() const {
  if (boundaries.empty()) throw ArgumentError("at least one interval boundary is required");
  for (std::size_t j = 0; j < boundaries.size(); ++j) {
    if (!(boundaries[j] > 0.0)) throw ArgumentError("interval boundaries must be positive");
    if (j > 0 && !(boundaries[j] > boundaries[j - 1]))
      throw ArgumentError("interval boundaries must be strictly increasing");
  }
  if (end_of_study != 0.0 && end_of_study < boundaries.back())
    throw ArgumentError("end_of_study must not precede the last boundary");
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  CsvTable table;
  std::string line;
  long row = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') continue;
    if (strip(line).empty()) continue;
    if (!have_header) {
      table.header = split_csv_line(line, 0, path);
      for (auto& name : table.header) name = strip(name);
      have_header = true;
      continue;
    }
    ++row;
    auto fields = split_csv_line(line, row, path);
    if (fields.size() != table.header.size())
      throw DataError(path + ": row " + std::to_string(row) + ": expected " +
                      std::to_string(table.header.size()) + " fields, got " +
                      std::to_string(fields.size()));
    table.rows.push_back(std::move(fields));
  }
  if (!have_header) throw DataError(path + ": empty file (no header)");
  return table;
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

void write_csv(std::ostream& out, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  out << "# format_version " << kFormatVersion << "\n";
  for (std::size_t i = 0; i < header.size(); ++i)
    out << (i ? "," : "") << csv_escape(header[i]);
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_escape(row[i]);
    out << "\n";
  }
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.12g", value);
  return buffer;
}

LoadedCohort load_cohort(const std::string& path, const ColumnMapping& mapping,
                         const DiscretizationSpec& spec) {
  mapping.check_valid();
  spec.check_valid();
  const CsvTable table = read_csv(path);
  const auto column_of = [&](const std::string& name) {
    const int idx = table.column(name);
    if (idx < 0) throw DataError(path + ": column '" + name + "' not found in header");
    return idx;
  };
  const int time_col = column_of(mapping.time_column);
  const int event_col = column_of(mapping.event_column);
  std::vector<int> surrogate_cols;
  for (const auto& name : mapping.surrogate_columns) surrogate_cols.push_back(column_of(name));
  std::vector<int> covariate_cols;
  for (const auto& name : mapping.covariate_columns) covariate_cols.push_back(column_of(name));
  const int flag_col = mapping.validated_flag_column ? column_of(*mapping.validated_flag_column) : -1;

  const int J = static_cast<int>(spec.boundaries.size());
  const double end_of_study =
      spec.end_of_study != 0.0 ? spec.end_of_study : spec.boundaries.back();

  LoadedCohort out;
  out.cohort.n_times = J;
  out.cohort.max_followup_index = J;
  out.cohort.n_covariates = static_cast<int>(covariate_cols.size());

  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const long row = static_cast<long>(r) + 1;
    const auto& fields = table.rows[r];
    const std::string where = path + ": row " + std::to_string(row);
    const double time = parse_double(fields[time_col], where + ", column '" + mapping.time_column + "'");
    if (!(time > 0.0)) throw DataError(where + ": non-positive time " + fields[time_col]);
    const bool event = parse_bool(fields[event_col], where + ", column '" + mapping.event_column + "'");

    if (!event && spec.drop_intermittent && time < end_of_study) {
      ++out.dropped_intermittent;
      continue;
    }

    SubjectRecord rec;
    if (time > spec.boundaries.back()) {
      // Beyond the study window: fully followed, no event inside it.
      rec.time_index = J;
      rec.event = false;
    } else {
      int idx = 1;
      while (time > spec.boundaries[idx - 1]) ++idx;
      rec.time_index = idx;
      rec.event = event;
    }

    for (int col : surrogate_cols) {
      const long code = parse_long(fields[col], where + ", surrogate column");
      rec.surrogate.push_back(static_cast<int>(code));
    }

    int present = 0;
    Vector covariates(covariate_cols.size());
    for (std::size_t k = 0; k < covariate_cols.size(); ++k) {
      const std::string cell = fields[covariate_cols[k]];
      if (strip(cell).empty()) continue;
      covariates[k] = parse_double(cell, where + ", covariate column");
      ++present;
    }
    if (present == static_cast<int>(covariate_cols.size())) {
      rec.covariates = covariates;
    } else if (present != 0) {
      throw DataError(where + ": covariates must be all present or all empty");
    }

    bool validated = rec.covariates.has_value();
    if (flag_col >= 0) {
      validated = parse_bool(fields[flag_col], where + ", validated flag");
      if (validated && !rec.covariates)
        throw DataError(where + ": flagged as validated but covariates are incomplete");
    }

    const std::size_t record_index = out.cohort.records.size();
    if (validated) out.validated.push_back(record_index);
    out.cohort.records.push_back(std::move(rec));
    out.raw_times.push_back(time);
    out.raw_events.push_back(event ? 1 : 0);
    out.source_rows.push_back(row);
    out.row_to_record[row] = record_index;
  }

  if (out.cohort.records.empty()) throw DataError(path + ": no usable rows");
  const double dropped_share = static_cast<double>(out.dropped_intermittent) /
                               static_cast<double>(table.rows.size());
  if (dropped_share > 0.20) {
    std::ostringstream msg;
    msg << out.dropped_intermittent << " of " << table.rows.size()
        << " rows dropped by the reduced-cohort rule (" << format_double(100.0 * dropped_share)
        << "%)";
    out.warnings.push_back(msg.str());
  }
  out.cohort.check_valid();
  return out;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  KeyValues kv;
  std::string line;
  long row = 0;
  while (std::getline(in, line)) {
    ++row;
    const std::string text = strip(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos)
      throw DataError(path + ": line " + std::to_string(row) + ": expected key = value");
    const std::string key = strip(text.substr(0, eq));
    const std::string value = strip(text.substr(eq + 1));
    if (key.empty())
      throw DataError(path + ": line " + std::to_string(row) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

std::string require(const KeyValues& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DataError("missing required key '" + key + "'");
  return it->second;
}

std::optional<std::string> lookup(const KeyValues& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) return std::nullopt;
  return it->second;
}

ColumnMapping mapping_from(const KeyValues& kv) {
  ColumnMapping mapping;
  mapping.time_column = require(kv, "time_column");
  mapping.event_column = require(kv, "event_column");
  mapping.surrogate_columns = split_list(require(kv, "surrogate_columns"));
  mapping.covariate_columns = split_list(require(kv, "covariate_columns"));
  if (auto flag = lookup(kv, "validated_flag_column"); flag && !flag->empty())
    mapping.validated_flag_column = *flag;
  mapping.check_valid();
  return mapping;
}

DiscretizationSpec discretization_from(const KeyValues& kv) {
  DiscretizationSpec spec;
  for (const auto& item : split_list(require(kv, "boundaries")))
    spec.boundaries.push_back(parse_double(item, "boundaries"));
  if (auto drop = lookup(kv, "drop_intermittent"))
    spec.drop_intermittent = parse_bool(*drop, "drop_intermittent");
  if (auto end = lookup(kv, "end_of_study"))
    spec.end_of_study = parse_double(*end, "end_of_study");
  spec.check_valid();
  return spec;
}

IndexList read_row_list(const std::string& path, const LoadedCohort& loaded) {
  const CsvTable table = read_csv(path);
  const int row_col = table.column("row");
  if (row_col < 0) throw DataError(path + ": expected a 'row' column");
  IndexList out;
  std::set<long> seen;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const long row = parse_long(table.rows[r][row_col], path + ": row " + std::to_string(r + 1));
    if (!seen.insert(row).second)
      throw DataError(path + ": cohort row " + std::to_string(row) + " listed twice");
    const auto it = loaded.row_to_record.find(row);
    if (it == loaded.row_to_record.end())
      throw DataError(path + ": cohort row " + std::to_string(row) +
                      " is not part of the loaded cohort");
    out.push_back(it->second);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::pair<std::size_t, double>> read_weighted_rows(const std::string& path,
                                                               const LoadedCohort& loaded) {
  const CsvTable table = read_csv(path);
  const int row_col = table.column("row");
  const int weight_col = table.column("weight");
  if (row_col < 0 || weight_col < 0)
    throw DataError(path + ": expected 'row' and 'weight' columns");
  std::vector<std::pair<std::size_t, double>> out;
  std::set<long> seen;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const std::string where = path + ": row " + std::to_string(r + 1);
    const long row = parse_long(table.rows[r][row_col], where);
    if (!seen.insert(row).second)
      throw DataError(path + ": cohort row " + std::to_string(row) + " listed twice");
    const double weight = parse_double(table.rows[r][weight_col], where);
    if (!(weight > 0.0)) throw DataError(where + ": weights must be positive");
    const auto it = loaded.row_to_record.find(row);
    if (it == loaded.row_to_record.end())
      throw DataError(path + ": cohort row " + std::to_string(row) +
                      " is not part of the loaded cohort");
    out.emplace_back(it->second, weight);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_allocation_csv(std::ostream& out, const Allocation& allocation) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& [key, count] : allocation.counts) {
    std::string codes;
    for (std::size_t i = 0; i < key.surrogate.size(); ++i) {
      if (i) codes += ",";
      codes += std::to_string(key.surrogate[i]);
    }
    rows.push_back({key.to_string(), std::to_string(key.time_index),
                    std::to_string(key.event ? 1 : 0), codes, std::to_string(count)});
  }
  write_csv(out, {"stratum", "y", "d", "z", "count"}, rows);
}

Allocation read_allocation_csv(const std::string& path) {
  const CsvTable table = read_csv(path);
  const int stratum_col = table.column("stratum");
  const int count_col = table.column("count");
  if (stratum_col < 0 || count_col < 0)
    throw DataError(path + ": expected 'stratum' and 'count' columns");
  Allocation out;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const StratumKey key = StratumKey::parse(table.rows[r][stratum_col]);
    const long count =
        parse_long(table.rows[r][count_col], path + ": row " + std::to_string(r + 1));
    if (count < 0) throw DataError(path + ": negative count in row " + std::to_string(r + 1));
    out.counts[key] = count;
    out.total += count;
  }
  return out;
}

}  // namespace twophase::io
