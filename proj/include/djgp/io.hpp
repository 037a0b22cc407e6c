#pragma once

#include <string>
#include <vector>

#include "djgp/elbo.hpp"

namespace djgp {

// Shortest decimal string that parses back to the same double.
std::string format_double(double v);
// Exact hexadecimal float ("0x1.9p+3"); used where bit-exact round-trips matter.
std::string format_hex(double v);
double parse_hex(const std::string& s);

struct Dataset {
  Matrix x;  // N x D
  Vector y;  // N
};

// CSV with header x1,...,xD,y; '.' decimal, comma separator. Parse failures
// report the 1-based line number.
Dataset read_dataset_csv(const std::string& path);
void write_dataset_csv(const std::string& path, const Matrix& x, const Vector& y);

struct PredictionRows {
  std::vector<int> index;
  std::vector<double> mean;
  std::vector<double> variance;
};

// CSV with header index,mean,variance, one row per test point.
PredictionRows read_predictions_csv(const std::string& path);
void write_predictions_csv(const std::string& path, const std::vector<double>& mean,
                           const std::vector<double>& variance);

// Versioned JSON container for the full variational state. All floating
// values are stored as hex-float strings, so a load reproduces the saved
// state bit for bit.
void save_model(const std::string& path, const VariationalState& s);
VariationalState load_model(const std::string& path);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace djgp
