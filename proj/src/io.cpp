#include "djgp/io.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <utility>

#include "json.hpp"

#include "djgp/common.hpp"

namespace djgp {

using nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return std::string(buf);
}

double parse_hex(const std::string& s) {
  if (s.empty()) throw InputError("empty floating-point field");
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw InputError("malformed floating-point field '" + s + "'");
  return v;
}

namespace {

double parse_field(const std::string& s, const std::string& where) {
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw InputError(where + ": malformed number '" + s + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  for (;;) {
    size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string chomp(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  return f;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  return f;
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string(what) + " contains a non-finite value");
}

json mat_to_json(const Matrix& m, const char* what) {
  json data = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      require_finite(m(i, j), what);
      data.push_back(format_hex(m(i, j)));
    }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix mat_from_json(const json& j, const std::string& what) {
  const long rows = j.at("rows").get<long>();
  const long cols = j.at("cols").get<long>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 || static_cast<long>(data.size()) != rows * cols)
    throw InputError("model field '" + what + "' has inconsistent dimensions");
  Matrix m(rows, cols);
  size_t idx = 0;
  for (long i = 0; i < rows; ++i)
    for (long c = 0; c < cols; ++c) m(i, c) = parse_hex(data[idx++].get<std::string>());
  return m;
}

json vec_to_json(const Vector& v, const char* what) {
  json data = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    require_finite(v[i], what);
    data.push_back(format_hex(v[i]));
  }
  return data;
}

Vector vec_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw InputError("model field '" + what + "' must be an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (size_t i = 0; i < j.size(); ++i)
    v[static_cast<Eigen::Index>(i)] = parse_hex(j[i].get<std::string>());
  return v;
}

}  // namespace

Dataset read_dataset_csv(const std::string& path) {
  std::ifstream f = open_in(path);
  std::string line;
  if (!std::getline(f, line)) throw InputError(path + ":1: missing header row");
  auto header = split_csv_line(chomp(line));
  const int d = static_cast<int>(header.size()) - 1;
  if (d < 1 || header.back() != "y")
    throw InputError(path + ":1: expected header x1,...,xD,y");
  for (int i = 0; i < d; ++i)
    if (header[static_cast<size_t>(i)] != "x" + std::to_string(i + 1))
      throw InputError(path + ":1: expected header column x" + std::to_string(i + 1));

  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    std::string body = chomp(line);
    if (body.empty()) continue;
    auto fields = split_csv_line(body);
    if (static_cast<int>(fields.size()) != d + 1)
      throw InputError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(d + 1) +
                       " fields, found " + std::to_string(fields.size()));
    std::vector<double> row(static_cast<size_t>(d) + 1);
    for (size_t i = 0; i < fields.size(); ++i)
      row[i] = parse_field(fields[i], path + ":" + std::to_string(lineno));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError(path + ": no data rows");

  Dataset ds;
  ds.x.resize(static_cast<Eigen::Index>(rows.size()), d);
  ds.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < d; ++c) ds.x(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<size_t>(c)];
    ds.y[static_cast<Eigen::Index>(i)] = rows[i][static_cast<size_t>(d)];
  }
  return ds;
}

void write_dataset_csv(const std::string& path, const Matrix& x, const Vector& y) {
  if (x.rows() != y.size()) throw InputError("dataset write: row count mismatch");
  std::ofstream f = open_out(path);
  for (Eigen::Index c = 0; c < x.cols(); ++c) f << "x" << (c + 1) << ",";
  f << "y\n";
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      require_finite(x(i, c), "dataset");
      f << format_double(x(i, c)) << ",";
    }
    require_finite(y[i], "dataset");
    f << format_double(y[i]) << "\n";
  }
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

PredictionRows read_predictions_csv(const std::string& path) {
  std::ifstream f = open_in(path);
  std::string line;
  if (!std::getline(f, line)) throw InputError(path + ":1: missing header row");
  if (chomp(line) != "index,mean,variance")
    throw InputError(path + ":1: expected header index,mean,variance");
  PredictionRows out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    std::string body = chomp(line);
    if (body.empty()) continue;
    auto fields = split_csv_line(body);
    if (fields.size() != 3)
      throw InputError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
    const std::string where = path + ":" + std::to_string(lineno);
    out.index.push_back(static_cast<int>(parse_field(fields[0], where)));
    out.mean.push_back(parse_field(fields[1], where));
    out.variance.push_back(parse_field(fields[2], where));
  }
  if (out.index.empty()) throw InputError(path + ": no data rows");
  return out;
}

void write_predictions_csv(const std::string& path, const std::vector<double>& mean,
                           const std::vector<double>& variance) {
  if (mean.size() != variance.size()) throw InputError("predictions write: length mismatch");
  std::ofstream f = open_out(path);
  f << "index,mean,variance\n";
  for (size_t i = 0; i < mean.size(); ++i) {
    require_finite(mean[i], "predictions");
    require_finite(variance[i], "predictions");
    f << i << "," << format_double(mean[i]) << "," << format_double(variance[i]) << "\n";
  }
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

namespace {

constexpr const char* kModelSchema = "djgp-model";
constexpr int kModelVersion = 1;

json region_to_json(const RegionState& r) {
  json idx = json::array();
  for (int v : r.region.index) idx.push_back(v);
  return json{
      {"x", mat_to_json(r.region.x, "region.x")},
      {"y", vec_to_json(r.region.y, "region.y")},
      {"xstar", vec_to_json(r.region.xstar, "region.xstar")},
      {"index", std::move(idx)},
      {"inducing",
       json{{"inputs", mat_to_json(r.inducing.inputs, "inducing.inputs")},
            {"post_mean", vec_to_json(r.inducing.post_mean, "inducing.post_mean")},
            {"u_root", mat_to_json(r.inducing.u_root, "inducing.u_root")}}},
      {"params",
       json{{"boundary", vec_to_json(r.params.boundary, "params.boundary")},
            {"noise_variance", format_hex(r.params.noise_variance)},
            {"mean", format_hex(r.params.mean)},
            {"amplitude", format_hex(r.params.amplitude)},
            {"outlier_level", format_hex(r.params.outlier_level)},
            {"rho", vec_to_json(r.params.rho, "params.rho")}}}};
}

RegionState region_from_json(const json& j) {
  RegionState r;
  r.region.x = mat_from_json(j.at("x"), "region.x");
  r.region.y = vec_from_json(j.at("y"), "region.y");
  r.region.xstar = vec_from_json(j.at("xstar"), "region.xstar");
  for (const auto& v : j.at("index")) r.region.index.push_back(v.get<int>());
  const json& ind = j.at("inducing");
  r.inducing.inputs = mat_from_json(ind.at("inputs"), "inducing.inputs");
  r.inducing.post_mean = vec_from_json(ind.at("post_mean"), "inducing.post_mean");
  r.inducing.u_root = mat_from_json(ind.at("u_root"), "inducing.u_root");
  const json& par = j.at("params");
  r.params.boundary = vec_from_json(par.at("boundary"), "params.boundary");
  r.params.noise_variance = parse_hex(par.at("noise_variance").get<std::string>());
  r.params.mean = parse_hex(par.at("mean").get<std::string>());
  r.params.amplitude = parse_hex(par.at("amplitude").get<std::string>());
  r.params.outlier_level = parse_hex(par.at("outlier_level").get<std::string>());
  r.params.rho = vec_from_json(par.at("rho"), "params.rho");
  return r;
}

}  // namespace

void save_model(const std::string& path, const VariationalState& s) {
  json j;
  j["schema"] = kModelSchema;
  j["version"] = kModelVersion;
  j["config"] = json{{"q", s.config.q},
                     {"neighbors", s.config.neighbors},
                     {"l1", s.config.l1},
                     {"l2", s.config.l2},
                     {"n_quad", s.config.n_quad},
                     {"steps", s.config.steps},
                     {"rate", format_hex(s.config.rate)},
                     {"mc_samples", s.config.mc_samples}};
  j["train_x"] = mat_to_json(s.train_x, "train_x");
  j["train_y"] = vec_to_json(s.train_y, "train_y");
  j["theta_w"] = json{{"s2", format_hex(s.theta_w.s2)},
                      {"ell_w", vec_to_json(s.theta_w.ell_w, "theta_w.ell_w")}};
  j["global"] = json{{"k", s.global.k},
                     {"d", s.global.d},
                     {"inputs", mat_to_json(s.global.inputs, "global.inputs")},
                     {"post_mean", mat_to_json(s.global.post_mean, "global.post_mean")},
                     {"post_var", mat_to_json(s.global.post_var, "global.post_var")}};
  json regions = json::array();
  for (const auto& r : s.regions) regions.push_back(region_to_json(r));
  j["regions"] = std::move(regions);

  std::ofstream f = open_out(path);
  f << j.dump(1, '\t') << "\n";
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

VariationalState load_model(const std::string& path) {
  std::ifstream f = open_in(path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw InputError(path + ": not a valid model file (" + e.what() + ")");
  }
  try {
    if (j.at("schema").get<std::string>() != kModelSchema)
      throw InputError(path + ": unrecognized schema tag");
    if (j.at("version").get<int>() != kModelVersion)
      throw InputError(path + ": unsupported model version");
    VariationalState s;
    const json& c = j.at("config");
    s.config.q = c.at("q").get<int>();
    s.config.neighbors = c.at("neighbors").get<int>();
    s.config.l1 = c.at("l1").get<int>();
    s.config.l2 = c.at("l2").get<int>();
    s.config.n_quad = c.at("n_quad").get<int>();
    s.config.steps = c.at("steps").get<int>();
    s.config.rate = parse_hex(c.at("rate").get<std::string>());
    s.config.mc_samples = c.at("mc_samples").get<int>();
    s.train_x = mat_from_json(j.at("train_x"), "train_x");
    s.train_y = vec_from_json(j.at("train_y"), "train_y");
    s.theta_w.s2 = parse_hex(j.at("theta_w").at("s2").get<std::string>());
    s.theta_w.ell_w = vec_from_json(j.at("theta_w").at("ell_w"), "theta_w.ell_w");
    const json& g = j.at("global");
    s.global.k = g.at("k").get<int>();
    s.global.d = g.at("d").get<int>();
    s.global.inputs = mat_from_json(g.at("inputs"), "global.inputs");
    s.global.post_mean = mat_from_json(g.at("post_mean"), "global.post_mean");
    s.global.post_var = mat_from_json(g.at("post_var"), "global.post_var");
    for (const auto& rj : j.at("regions")) s.regions.push_back(region_from_json(rj));
    if (s.train_x.rows() != s.train_y.size())
      throw InputError(path + ": training pool rows and targets disagree");
    return s;
  } catch (const json::exception& e) {
    throw InputError(path + ": model file is missing fields (" + std::string(e.what()) + ")");
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f = open_out(path);
  f << content;
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

std::string read_text_file(const std::string& path) {
  std::ifstream f = open_in(path);
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("read failed for '" + path + "'");
  return ss.str();
}

}  // namespace djgp
