#pragma once

// Report files: CSV with fixed 6-decimal numbers and 8-bit binary PGM heatmaps.

#include "rise/routing_stats.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace rise {

/// Fixed 6-decimal rendering used by every numeric report.
std::string format_number(double value);

/// Row of a Shallow/Middle/Deep/Avg table; Avg is the mean of the three
/// region averages.
struct RegionRow {
  std::string language;
  RegionAverages averages;

  double avg() const { return (averages.shallow + averages.middle + averages.deep) / 3.0; }
};

/// "language,<label...>" header, one row per language.
std::string overlap_matrix_csv(const std::vector<std::string>& labels, const MatrixXd& matrix);

/// "language,reference,L0,...,L{n-1}".
std::string curves_csv(const std::vector<SimilarityCurve>& curves);

/// "language,Shallow,Middle,Deep,Avg" plus a closing Mean row over languages.
std::string region_table_csv(const std::vector<RegionRow>& rows);

/// Binary P5 image, one pixel per entry, gray = round(255 * clamp(v, 0, 1)).
std::string matrix_pgm(const MatrixXd& matrix);

/// Parses a P5 image written by matrix_pgm back into [0, 1] values.
MatrixXd read_pgm(const std::string& bytes);

/// Parses a curves CSV written by curves_csv.
std::vector<SimilarityCurve> parse_curves_csv(const std::string& text);

/// Parses a region table written by region_table_csv (the Mean row is skipped).
std::vector<RegionRow> parse_region_table_csv(const std::string& text);

void write_file(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace rise
