#include "rise/reports.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rise {

std::string format_number(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  // Avoid "-0.000000" so that sign noise never reaches golden files.
  if (std::string(buf) == "-0.000000") return "0.000000";
  return buf;
}

std::string overlap_matrix_csv(const std::vector<std::string>& labels, const MatrixXd& matrix) {
  if (static_cast<Eigen::Index>(labels.size()) != matrix.rows() || matrix.rows() != matrix.cols())
    throw InputError("overlap matrix CSV: labels do not match the matrix shape");
  std::ostringstream out;
  out << "language";
  for (const auto& l : labels) out << ',' << l;
  out << '\n';
  for (Eigen::Index i = 0; i < matrix.rows(); ++i) {
    out << labels[i];
    for (Eigen::Index j = 0; j < matrix.cols(); ++j) out << ',' << format_number(matrix(i, j));
    out << '\n';
  }
  return out.str();
}

std::string curves_csv(const std::vector<SimilarityCurve>& curves) {
  std::ostringstream out;
  out << "language,reference";
  const std::size_t n = curves.empty() ? 0 : curves[0].values.size();
  for (std::size_t l = 0; l < n; ++l) out << ",L" << l;
  out << '\n';
  for (const auto& c : curves) {
    if (c.values.size() != n) throw InputError("curves CSV: curves of different lengths");
    out << c.language << ',' << c.reference;
    for (double v : c.values) out << ',' << format_number(v);
    out << '\n';
  }
  return out.str();
}

std::string region_table_csv(const std::vector<RegionRow>& rows) {
  std::ostringstream out;
  out << "language,Shallow,Middle,Deep,Avg\n";
  RegionAverages sum;
  double avg_sum = 0;
  for (const auto& r : rows) {
    out << r.language << ',' << format_number(r.averages.shallow) << ','
        << format_number(r.averages.middle) << ',' << format_number(r.averages.deep) << ','
        << format_number(r.avg()) << '\n';
    sum.shallow += r.averages.shallow;
    sum.middle += r.averages.middle;
    sum.deep += r.averages.deep;
    avg_sum += r.avg();
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    out << "Mean," << format_number(sum.shallow / n) << ',' << format_number(sum.middle / n) << ','
        << format_number(sum.deep / n) << ',' << format_number(avg_sum / n) << '\n';
  }
  return out.str();
}

std::string matrix_pgm(const MatrixXd& matrix) {
  std::ostringstream out;
  out << "P5\n" << matrix.cols() << ' ' << matrix.rows() << "\n255\n";
  std::string body;
  body.reserve(static_cast<std::size_t>(matrix.size()));
  for (Eigen::Index i = 0; i < matrix.rows(); ++i)
    for (Eigen::Index j = 0; j < matrix.cols(); ++j) {
      const double v = std::clamp(matrix(i, j), 0.0, 1.0);
      body.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
  return out.str() + body;
}

MatrixXd read_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  long cols = 0, rows = 0, maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (magic != "P5" || cols < 0 || rows < 0 || maxval != 255) throw InputError("not an 8-bit P5 image");
  in.get();
  const std::size_t offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() != offset + static_cast<std::size_t>(rows * cols))
    throw InputError("PGM size does not match its header");
  MatrixXd m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j)
      m(i, j) = static_cast<unsigned char>(bytes[offset + i * cols + j]) / 255.0;
  return m;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  return out;
}

std::vector<std::vector<std::string>> rows_of(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split(line));
  if (rows.empty()) throw InputError("empty CSV");
  return rows;
}

double number(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw InputError("bad number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw InputError("bad number '" + s + "'");
  }
}

}  // namespace

std::vector<SimilarityCurve> parse_curves_csv(const std::string& text) {
  const auto rows = rows_of(text);
  std::vector<SimilarityCurve> curves;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw InputError("ragged curves CSV");
    SimilarityCurve c{rows[r][0], rows[r][1], {}};
    for (std::size_t k = 2; k < rows[r].size(); ++k) c.values.push_back(number(rows[r][k]));
    curves.push_back(std::move(c));
  }
  return curves;
}

std::vector<RegionRow> parse_region_table_csv(const std::string& text) {
  const auto rows = rows_of(text);
  std::vector<RegionRow> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 5) throw InputError("region table rows need 5 fields");
    if (rows[r][0] == "Mean") continue;
    RegionRow row;
    row.language = rows[r][0];
    row.averages = {number(rows[r][1]), number(rows[r][2]), number(rows[r][3])};
    out.push_back(row);
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << contents;
  if (!out) throw InputError("write failed for " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace rise
