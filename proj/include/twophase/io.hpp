#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "twophase/types.hpp"

namespace twophase::io {

inline constexpr int kFormatVersion = 1;

struct ColumnMapping {
  std::string time_column;
  std::string event_column;
  std::vector<std::string> surrogate_columns;
  std::vector<std::string> covariate_columns;
  std::optional<std::string> validated_flag_column;

  void check_valid() const;  // distinct, non-empty names
};

struct DiscretizationSpec {
  std::vector<double> boundaries;  // strictly increasing, positive
  bool drop_intermittent = false;  // exclude censoring strictly before end_of_study
  double end_of_study = 0.0;       // defaults to the last boundary

  void check_valid() const;
};

struct LoadedCohort {
  Cohort cohort;
  IndexList validated;             // flag column, or rows with complete covariates
  std::vector<double> raw_times;   // continuous times per record, file order
  std::vector<char> raw_events;    // event flags before discretization
  std::vector<long> source_rows;   // 1-based data row in the file per record
  std::map<long, std::size_t> row_to_record;
  long dropped_intermittent = 0;
  std::vector<std::string> warnings;
};

// Reads a CSV cohort, discretizes times onto the interval grid and applies
// the reduced-cohort rule when requested. Rows are addressed 1-based
// (excluding the header) in every error message.
LoadedCohort load_cohort(const std::string& path, const ColumnMapping& mapping,
                         const DiscretizationSpec& spec);

// --- flat key = value configuration files ---------------------------------

using KeyValues = std::map<std::string, std::string>;

KeyValues read_key_values(const std::string& path);
ColumnMapping mapping_from(const KeyValues& kv);
DiscretizationSpec discretization_from(const KeyValues& kv);

std::string require(const KeyValues& kv, const std::string& key);
std::optional<std::string> lookup(const KeyValues& kv, const std::string& key);
double parse_double(const std::string& text, const std::string& context);
long parse_long(const std::string& text, const std::string& context);
bool parse_bool(const std::string& text, const std::string& context);
std::vector<std::string> split_list(const std::string& text);

// --- CSV primitives --------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

// Lines starting with '#' are skipped (the writers put the format_version
// there). Fields may be double-quoted with "" escapes.
CsvTable read_csv(const std::string& path);

void write_csv(std::ostream& out, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

std::string format_double(double value);

// Row lists used as the interchange between design waves and fits: a CSV
// with a `row` column (1-based data rows of the cohort file), optionally a
// `weight` column.
IndexList read_row_list(const std::string& path, const LoadedCohort& loaded);
std::vector<std::pair<std::size_t, double>> read_weighted_rows(const std::string& path,
                                                               const LoadedCohort& loaded);

void write_allocation_csv(std::ostream& out, const Allocation& allocation);
Allocation read_allocation_csv(const std::string& path);

}  // namespace twophase::io
