#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "djgp/cli.hpp"
#include "djgp/common.hpp"
#include "djgp/datagen.hpp"
#include "djgp/elbo.hpp"
#include "djgp/io.hpp"
#include "djgp/metrics.hpp"
#include "doctest.h"

using djgp::Matrix;
using djgp::Vector;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

uint64_t bits(double v) {
  uint64_t b;
  std::memcpy(&b, &v, sizeof b);
  return b;
}

struct TempDir {
  fs::path p;
  TempDir() {
    static std::atomic<int> counter{0};
    p = fs::temp_directory_path() / ("djgp-io-cli-" + std::to_string(counter++));
    fs::remove_all(p);
    fs::create_directories(p);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(p, ec);
  }
  std::string file(const std::string& name) const { return (p / name).string(); }
};

int call_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "djgp");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return djgp::run_cli(static_cast<int>(argv.size()), argv.data());
}

bool message_mentions(const std::exception& e, const std::string& needle) {
  return std::string(e.what()).find(needle) != std::string::npos;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start < text.size()) {
    size_t pos = text.find('\n', start);
    if (pos == std::string::npos) pos = text.size();
    out.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

TEST_CASE("floating-point text round-trips") {
  std::vector<double> specials = {0.0,
                                  -0.0,
                                  1.0,
                                  -1.0,
                                  0.1,
                                  1.0 / 3.0,
                                  3.141592653589793,
                                  1e-300,
                                  5e-324,  // smallest denormal
                                  2.2250738585072014e-308,
                                  1.7976931348623157e308,
                                  -6.02214076e23,
                                  9.859676543759770e-305};

  SUBCASE("hex form is bit exact") {
    for (double v : specials) CHECK(bits(djgp::parse_hex(djgp::format_hex(v))) == bits(v));
    djgp::Rng rng(2101);
    for (int t = 0; t < 500; ++t) {
      double v = (2.0 * rng.uniform01() - 1.0) * std::pow(2.0, rng.uniform(-320.0, 320.0));
      CHECK(bits(djgp::parse_hex(djgp::format_hex(v))) == bits(v));
    }
  }

  SUBCASE("shortest decimal form parses back to the same double") {
    for (double v : specials) CHECK(bits(std::strtod(djgp::format_double(v).c_str(), nullptr)) == bits(v));
    djgp::Rng rng(2102);
    for (int t = 0; t < 500; ++t) {
      double v = rng.normal() * std::pow(10.0, rng.uniform(-30.0, 30.0));
      CHECK(bits(std::strtod(djgp::format_double(v).c_str(), nullptr)) == bits(v));
    }
    CHECK(djgp::format_double(0.1) == "0.1");
    CHECK(djgp::format_double(0.5) == "0.5");
    CHECK(djgp::format_double(-2.5) == "-2.5");
  }

  SUBCASE("malformed hex fields are rejected") {
    CHECK_THROWS_AS(djgp::parse_hex(""), djgp::InputError);
    CHECK_THROWS_AS(djgp::parse_hex("zzz"), djgp::InputError);
    CHECK_THROWS_AS(djgp::parse_hex("0x1.8p+1junk"), djgp::InputError);
    CHECK_THROWS_AS(djgp::parse_hex("0x1.8p+1 "), djgp::InputError);
    // "inf" is a valid strtod token; corrupted files surface later as
    // numerical errors rather than parse errors.
    CHECK(std::isinf(djgp::parse_hex("inf")));
  }
}

TEST_CASE("dataset files") {
  TempDir tmp;

  SUBCASE("write then read reproduces every value") {
    djgp::Rng rng(2103);
    Matrix x(7, 3);
    Vector y(7);
    for (int i = 0; i < 7; ++i) {
      for (int j = 0; j < 3; ++j) x(i, j) = 10.0 * rng.normal();
      y[i] = rng.normal() / 7.0;
    }
    std::string path = tmp.file("data.csv");
    djgp::write_dataset_csv(path, x, y);
    CHECK(djgp::read_text_file(path).rfind("x1,x2,x3,y\n", 0) == 0);
    djgp::Dataset ds = djgp::read_dataset_csv(path);
    REQUIRE(ds.x.rows() == 7);
    REQUIRE(ds.x.cols() == 3);
    CHECK((ds.x.array() == x.array()).all());
    CHECK((ds.y.array() == y.array()).all());
  }

  SUBCASE("parse failures carry one-based line numbers") {
    std::string path = tmp.file("bad.csv");

    djgp::write_text_file(path, "x1,y\n1.0\n");
    CHECK_THROWS_WITH_AS(djgp::read_dataset_csv(path),
                         doctest::Contains(":2:"), djgp::InputError);

    djgp::write_text_file(path, "x1,y\n1.0,2.0\n1.0,oops\n");
    try {
      djgp::read_dataset_csv(path);
      CHECK(false);
    } catch (const djgp::InputError& e) {
      CHECK(message_mentions(e, ":3:"));
      CHECK(message_mentions(e, "oops"));
    }

    djgp::write_text_file(path, "a,y\n1.0,2.0\n");
    CHECK_THROWS_WITH_AS(djgp::read_dataset_csv(path),
                         doctest::Contains(":1:"), djgp::InputError);

    djgp::write_text_file(path, "");
    CHECK_THROWS_AS(djgp::read_dataset_csv(path), djgp::InputError);

    djgp::write_text_file(path, "x1,y\n");
    CHECK_THROWS_WITH_AS(djgp::read_dataset_csv(path),
                         doctest::Contains("no data rows"), djgp::InputError);
  }

  SUBCASE("blank lines and carriage returns are tolerated") {
    std::string path = tmp.file("crlf.csv");
    djgp::write_text_file(path, "x1,y\r\n\r\n1.5,2\r\n\n");
    djgp::Dataset ds = djgp::read_dataset_csv(path);
    CHECK(ds.x.rows() == 1);
    CHECK(ds.x(0, 0) == 1.5);
    CHECK(ds.y[0] == 2.0);
  }

  SUBCASE("writer validation") {
    Matrix x = Matrix::Zero(2, 1);
    Vector y = Vector::Zero(3);
    CHECK_THROWS_AS(djgp::write_dataset_csv(tmp.file("w.csv"), x, y), djgp::InputError);
    Vector y2 = Vector::Zero(2);
    x(1, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(djgp::write_dataset_csv(tmp.file("w.csv"), x, y2), djgp::NumericalError);
    CHECK_THROWS_AS(djgp::read_dataset_csv(tmp.file("never-written.csv")), djgp::IoError);
  }
}

TEST_CASE("prediction files") {
  TempDir tmp;
  std::string path = tmp.file("pred.csv");

  SUBCASE("write then read reproduces rows in order") {
    djgp::write_predictions_csv(path, {1.5, -2.25, 0.0}, {0.25, 4.0, 1e-12});
    CHECK(lines_of(djgp::read_text_file(path)).front() == "index,mean,variance");
    djgp::PredictionRows rows = djgp::read_predictions_csv(path);
    REQUIRE(rows.index.size() == 3);
    CHECK(rows.index == std::vector<int>{0, 1, 2});
    CHECK(rows.mean == std::vector<double>{1.5, -2.25, 0.0});
    CHECK(rows.variance == std::vector<double>{0.25, 4.0, 1e-12});
  }

  SUBCASE("format violations are rejected with line numbers") {
    djgp::write_text_file(path, "mean,variance\n0,1\n");
    CHECK_THROWS_WITH_AS(djgp::read_predictions_csv(path),
                         doctest::Contains(":1:"), djgp::InputError);
    djgp::write_text_file(path, "index,mean,variance\n0,1\n");
    CHECK_THROWS_WITH_AS(djgp::read_predictions_csv(path),
                         doctest::Contains(":2:"), djgp::InputError);
    djgp::write_text_file(path, "index,mean,variance\n");
    CHECK_THROWS_AS(djgp::read_predictions_csv(path), djgp::InputError);
  }

  SUBCASE("writer validation") {
    CHECK_THROWS_AS(djgp::write_predictions_csv(path, {1.0}, {1.0, 2.0}), djgp::InputError);
    CHECK_THROWS_AS(
        djgp::write_predictions_csv(path, {std::numeric_limits<double>::infinity()}, {1.0}),
        djgp::NumericalError);
  }
}

TEST_CASE("model files rebuild the exact state") {
  TempDir tmp;
  djgp::Rng rng(2104);
  djgp::GeneratedPair pair = djgp::gen_l2(60, 8, rng);
  djgp::DjgpConfig cfg;
  cfg.q = 2;
  cfg.neighbors = 12;
  cfg.l1 = 2;
  cfg.l2 = 6;
  djgp::Rng init_rng(2105);
  djgp::VariationalState s = djgp::init_state(pair.train.z, pair.train.y, pair.test.z, cfg, init_rng);
  djgp::train(s, 2, 0.01, 1);

  std::string path = tmp.file("model.json");
  djgp::save_model(path, s);
  djgp::VariationalState r = djgp::load_model(path);

  SUBCASE("every stored block is bit identical") {
    CHECK(r.config.q == s.config.q);
    CHECK(r.config.neighbors == s.config.neighbors);
    CHECK(r.config.l1 == s.config.l1);
    CHECK(r.config.l2 == s.config.l2);
    CHECK(r.config.n_quad == s.config.n_quad);
    CHECK(bits(r.config.rate) == bits(s.config.rate));
    CHECK(r.config.mc_samples == s.config.mc_samples);
    CHECK((r.train_x.array() == s.train_x.array()).all());
    CHECK((r.train_y.array() == s.train_y.array()).all());
    CHECK(bits(r.theta_w.s2) == bits(s.theta_w.s2));
    CHECK((r.theta_w.ell_w.array() == s.theta_w.ell_w.array()).all());
    CHECK(r.global.k == s.global.k);
    CHECK(r.global.d == s.global.d);
    CHECK((r.global.inputs.array() == s.global.inputs.array()).all());
    CHECK((r.global.post_mean.array() == s.global.post_mean.array()).all());
    CHECK((r.global.post_var.array() == s.global.post_var.array()).all());
    REQUIRE(r.regions.size() == s.regions.size());
    for (size_t j = 0; j < s.regions.size(); ++j) {
      const auto& a = s.regions[j];
      const auto& b = r.regions[j];
      CHECK((b.region.x.array() == a.region.x.array()).all());
      CHECK((b.region.y.array() == a.region.y.array()).all());
      CHECK((b.region.xstar.array() == a.region.xstar.array()).all());
      CHECK(b.region.index == a.region.index);
      CHECK((b.inducing.inputs.array() == a.inducing.inputs.array()).all());
      CHECK((b.inducing.post_mean.array() == a.inducing.post_mean.array()).all());
      CHECK((b.inducing.u_root.array() == a.inducing.u_root.array()).all());
      CHECK((b.params.boundary.array() == a.params.boundary.array()).all());
      CHECK(bits(b.params.noise_variance) == bits(a.params.noise_variance));
      CHECK(bits(b.params.mean) == bits(a.params.mean));
      CHECK(bits(b.params.amplitude) == bits(a.params.amplitude));
      CHECK(bits(b.params.outlier_level) == bits(a.params.outlier_level));
      CHECK((b.params.rho.array() == a.params.rho.array()).all());
    }
    CHECK(bits(djgp::elbo(r, 1)) == bits(djgp::elbo(s, 1)));
  }

  SUBCASE("unreadable or foreign files are rejected") {
    CHECK_THROWS_AS(djgp::load_model(tmp.file("absent.json")), djgp::IoError);

    std::string garbled = tmp.file("garbled.json");
    djgp::write_text_file(garbled, "this is not json {{{");
    CHECK_THROWS_AS(djgp::load_model(garbled), djgp::InputError);

    std::string foreign = tmp.file("foreign.json");
    djgp::write_text_file(foreign, R"({"schema":"something-else","version":1})");
    CHECK_THROWS_WITH_AS(djgp::load_model(foreign),
                         doctest::Contains("schema"), djgp::InputError);

    json j = json::parse(djgp::read_text_file(path));
    j["version"] = 999;
    std::string future = tmp.file("future.json");
    djgp::write_text_file(future, j.dump());
    CHECK_THROWS_WITH_AS(djgp::load_model(future),
                         doctest::Contains("version"), djgp::InputError);

    std::string hollow = tmp.file("hollow.json");
    djgp::write_text_file(hollow, R"({"schema":"djgp-model","version":1})");
    CHECK_THROWS_AS(djgp::load_model(hollow), djgp::InputError);
  }

  SUBCASE("states with non-finite values cannot be saved") {
    s.train_x(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(djgp::save_model(tmp.file("nan.json"), s), djgp::NumericalError);
  }
}

TEST_CASE("rank aggregation") {
  using table = std::vector<std::vector<double>>;
  CHECK(djgp::mean_ranks(table{{3.0, 1.0, 2.0}}) == std::vector<double>{3.0, 1.0, 2.0});
  CHECK(djgp::mean_ranks(table{{1.0, 1.0, 2.0}}) == std::vector<double>{1.5, 1.5, 3.0});
  CHECK(djgp::mean_ranks(table{{5.0, 5.0, 5.0}}) == std::vector<double>{2.0, 2.0, 2.0});
  CHECK(djgp::mean_ranks(table{{1.0, 2.0}, {2.0, 1.0}}) == std::vector<double>{1.5, 1.5});
  CHECK(djgp::mean_ranks(table{{1.0, 2.0, 3.0}, {3.0, 2.0, 1.0}, {2.0, 2.0, 2.0}}) ==
        std::vector<double>{2.0, 2.0, 2.0});
  CHECK_THROWS_AS(djgp::mean_ranks(table{}), djgp::InputError);
  CHECK_THROWS_AS(djgp::mean_ranks(table{{}}), djgp::InputError);
  CHECK_THROWS_AS(djgp::mean_ranks(table{{1.0, 2.0}, {1.0}}), djgp::InputError);
}

TEST_CASE("command-line tool") {
  TempDir tmp;

  SUBCASE("generate writes a reproducible dataset") {
    std::string a = tmp.file("a"), b = tmp.file("b"), c = tmp.file("c");
    CHECK(call_cli({"generate", "--kind", "l2", "--ntrain", "40", "--ntest", "5", "--seed", "7",
                    "--out", a}) == 0);
    djgp::Dataset train = djgp::read_dataset_csv(a + "/train.csv");
    djgp::Dataset test = djgp::read_dataset_csv(a + "/test.csv");
    CHECK(train.x.rows() == 40);
    CHECK(train.x.cols() == 2);
    CHECK(test.x.rows() == 5);
    json meta = json::parse(djgp::read_text_file(a + "/meta.json"));
    CHECK(meta["kind"] == "l2");
    CHECK(meta["seed"] == 7);
    CHECK(meta["theta1"] == 9.0);
    CHECK(meta["noise_variance"] == 4.0);
    CHECK(meta["expansion"] == "none");
    CHECK(meta["target_dim"] == 2);

    CHECK(call_cli({"generate", "--kind", "l2", "--ntrain", "40", "--ntest", "5", "--seed", "7",
                    "--out", b}) == 0);
    CHECK(djgp::read_text_file(a + "/train.csv") == djgp::read_text_file(b + "/train.csv"));
    CHECK(djgp::read_text_file(a + "/test.csv") == djgp::read_text_file(b + "/test.csv"));

    CHECK(call_cli({"generate", "--kind", "l2", "--ntrain", "40", "--ntest", "5", "--seed", "8",
                    "--out", c}) == 0);
    CHECK(djgp::read_text_file(a + "/train.csv") != djgp::read_text_file(c + "/train.csv"));

    std::string d = tmp.file("d");
    setenv("DJGP_SEED", "7", 1);
    int rc = call_cli({"generate", "--kind", "l2", "--ntrain", "40", "--ntest", "5", "--out", d});
    unsetenv("DJGP_SEED");
    CHECK(rc == 0);
    CHECK(djgp::read_text_file(a + "/train.csv") == djgp::read_text_file(d + "/train.csv"));
    CHECK(json::parse(djgp::read_text_file(d + "/meta.json"))["seed"] == 7);
  }

  SUBCASE("generate applies dimension lifts") {
    std::string a = tmp.file("lift");
    CHECK(call_cli({"generate", "--kind", "l2", "--ntrain", "30", "--ntest", "4", "--expand",
                    "rp", "--d", "5", "--seed", "3", "--out", a}) == 0);
    djgp::Dataset train = djgp::read_dataset_csv(a + "/train.csv");
    CHECK(train.x.cols() == 5);
    json meta = json::parse(djgp::read_text_file(a + "/meta.json"));
    CHECK(meta["expansion"] == "rp");
    CHECK(meta["target_dim"] == 5);
    // rp cannot shrink below the latent dimension
    CHECK(call_cli({"generate", "--kind", "l2", "--ntrain", "30", "--ntest", "4", "--expand",
                    "rp", "--d", "1", "--seed", "3", "--out", tmp.file("bad-lift")}) == 2);
  }

  SUBCASE("full pipeline with exit codes") {
    std::string w = tmp.file("w");
    REQUIRE(call_cli({"generate", "--kind", "l2", "--ntrain", "60", "--ntest", "6", "--seed", "5",
                      "--out", w}) == 0);
    REQUIRE(call_cli({"train", "--train", w + "/train.csv", "--test", w + "/test.csv", "--out",
                      w + "/model.json", "--trace", w + "/trace.csv", "--q", "2", "--neighbors",
                      "12", "--l1", "2", "--l2", "6", "--steps", "2", "--rate", "0.01", "--mc",
                      "2", "--seed", "5", "--workers", "1"}) == 0);
    djgp::VariationalState m = djgp::load_model(w + "/model.json");
    CHECK(m.config.q == 2);
    CHECK(m.config.neighbors == 12);
    CHECK(m.regions.size() == 6);
    auto trace_lines = lines_of(djgp::read_text_file(w + "/trace.csv"));
    REQUIRE(trace_lines.size() >= 2);
    CHECK(trace_lines.front() == "step,elbo,best,rate");

    REQUIRE(call_cli({"predict", "--model", w + "/model.json", "--test", w + "/test.csv", "--out",
                      w + "/pred.csv", "--mc", "2", "--seed", "5", "--workers", "1"}) == 0);
    djgp::PredictionRows rows = djgp::read_predictions_csv(w + "/pred.csv");
    REQUIRE(rows.index.size() == 6);
    CHECK(rows.index.back() == 5);

    REQUIRE(call_cli({"evaluate", "--pred", w + "/pred.csv", "--truth", w + "/test.csv", "--out",
                      w + "/eval.json"}) == 0);
    json eval = json::parse(djgp::read_text_file(w + "/eval.json"));
    djgp::Dataset truth = djgp::read_dataset_csv(w + "/test.csv");
    std::vector<double> targets(truth.y.data(), truth.y.data() + truth.y.size());
    djgp::ScoreReport rep = djgp::score(rows.mean, rows.variance, targets);
    CHECK(eval["scores"]["rmse"].get<double>() == doctest::Approx(rep.rmse).epsilon(1e-15));
    CHECK(eval["scores"]["mean_crps"].get<double>() ==
          doctest::Approx(rep.mean_crps).epsilon(1e-15));
    CHECK(eval["scores"]["n"] == 6);

    std::string ranks = tmp.file("ranks.csv");
    djgp::write_text_file(ranks, "alpha,beta\n1,2\n2,1\n");
    REQUIRE(call_cli({"evaluate", "--rank-table", ranks, "--roughness", w + "/train.csv", "--knn",
                      "4", "--out", w + "/eval2.json"}) == 0);
    json eval2 = json::parse(djgp::read_text_file(w + "/eval2.json"));
    CHECK(eval2["mean_ranks"]["alpha"] == 1.5);
    CHECK(eval2["mean_ranks"]["beta"] == 1.5);
    CHECK(eval2["rank_runs"] == 2);
    CHECK(eval2["roughness"]["knn_k"] == 4);
    CHECK(eval2["roughness"]["g_avg"].get<double>() > 0.0);

    // input problems exit with 2
    CHECK(call_cli({"bogus"}) == 2);
    CHECK(call_cli({"generate", "--kind", "l2"}) == 2);  // --out is required
    std::string bad = tmp.file("bad.csv");
    djgp::write_text_file(bad, "x1,y\n1,oops\n");
    CHECK(call_cli({"train", "--train", bad, "--test", w + "/test.csv"}) == 2);
    CHECK(call_cli({"evaluate", "--pred", w + "/pred.csv", "--truth", w + "/train.csv"}) == 2);
    CHECK(call_cli({"evaluate"}) == 2);

    // i/o problems exit with 4
    CHECK(call_cli({"predict", "--model", tmp.file("absent.json"), "--test", w + "/test.csv"}) ==
          4);
    djgp::write_text_file(tmp.file("blocker"), "x");
    CHECK(call_cli({"generate", "--kind", "l2", "--out", tmp.file("blocker") + "/sub"}) == 4);

    // numerical breakdown exits with 3: corrupt the projection-prior scale so
    // every per-point factorization fails
    json broken = json::parse(djgp::read_text_file(w + "/model.json"));
    broken["theta_w"]["s2"] = "inf";
    djgp::write_text_file(w + "/model_bad.json", broken.dump());
    CHECK(call_cli({"predict", "--model", w + "/model_bad.json", "--test", w + "/test.csv",
                    "--out", w + "/pred_bad.csv", "--seed", "5", "--workers", "1"}) == 3);
  }

  SUBCASE("experiment matches the chained subcommands byte for byte") {
    std::string e = tmp.file("e"), e2 = tmp.file("e2"), f = tmp.file("f");
    std::vector<std::string> model_flags = {"--q",    "2",  "--neighbors", "12",   "--l1",
                                            "2",      "--l2", "6",         "--steps", "2",
                                            "--rate", "0.01", "--mc",      "2"};

    auto experiment = [&](const std::string& dir) {
      std::vector<std::string> args = {"experiment", "--kind", "l2",   "--ntrain", "60",
                                       "--ntest",    "6",      "--seed", "5",      "--workers",
                                       "1",          "--out",  dir};
      args.insert(args.end(), model_flags.begin(), model_flags.end());
      return call_cli(args);
    };
    REQUIRE(experiment(e) == 0);
    for (const char* name :
         {"train.csv", "test.csv", "meta.json", "model.json", "predictions.csv", "results.json",
          "timing.json"})
      CHECK(fs::exists(fs::path(e) / name));

    // the same seed must reproduce every reported byte
    REQUIRE(experiment(e2) == 0);
    CHECK(djgp::read_text_file(e + "/results.json") == djgp::read_text_file(e2 + "/results.json"));
    CHECK(djgp::read_text_file(e + "/predictions.csv") ==
          djgp::read_text_file(e2 + "/predictions.csv"));
    CHECK(djgp::read_text_file(e + "/model.json") == djgp::read_text_file(e2 + "/model.json"));

    // generate / train / predict with the same seed consume the same streams
    REQUIRE(call_cli({"generate", "--kind", "l2", "--ntrain", "60", "--ntest", "6", "--seed",
                      "5", "--out", f}) == 0);
    std::vector<std::string> train_args = {"train",  "--train", f + "/train.csv",
                                           "--test", f + "/test.csv", "--out",
                                           f + "/model.json", "--seed", "5", "--workers", "1"};
    train_args.insert(train_args.end(), model_flags.begin(), model_flags.end());
    REQUIRE(call_cli(train_args) == 0);
    REQUIRE(call_cli({"predict", "--model", f + "/model.json", "--test", f + "/test.csv", "--out",
                      f + "/predictions.csv", "--seed", "5", "--workers", "1"}) == 0);
    CHECK(djgp::read_text_file(e + "/train.csv") == djgp::read_text_file(f + "/train.csv"));
    CHECK(djgp::read_text_file(e + "/test.csv") == djgp::read_text_file(f + "/test.csv"));
    CHECK(djgp::read_text_file(e + "/model.json") == djgp::read_text_file(f + "/model.json"));
    CHECK(djgp::read_text_file(e + "/predictions.csv") ==
          djgp::read_text_file(f + "/predictions.csv"));

    // and evaluate on the chain's files reproduces the experiment's scores
    REQUIRE(call_cli({"evaluate", "--pred", f + "/predictions.csv", "--truth", f + "/test.csv",
                      "--out", f + "/eval.json"}) == 0);
    json results = json::parse(djgp::read_text_file(e + "/results.json"));
    json eval = json::parse(djgp::read_text_file(f + "/eval.json"));
    CHECK(eval["scores"]["rmse"].get<double>() == results["scores"]["rmse"].get<double>());
    CHECK(eval["scores"]["mean_crps"].get<double>() ==
          results["scores"]["mean_crps"].get<double>());
    CHECK(results["config"]["neighbors"] == 12);
    CHECK(std::isfinite(results["final_elbo"].get<double>()));
  }
}
