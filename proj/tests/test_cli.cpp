#include <doctest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "raglab/cli.h"
#include "support.h"

using namespace raglab;
using namespace raglab::testing;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json load_json(const std::filesystem::path& p) { return nlohmann::json::parse(slurp(p)); }

// A tiny world and a few training steps, shared by the tests below.
struct Fixture {
  TempDir tmp{"cli"};
  std::filesystem::path world = tmp.path / "world";
  std::filesystem::path model = tmp.path / "model";

  Fixture() {
    const auto g = cli({"gen-world", "--out", world.string(), "--entities", "6", "--relations", "2",
                        "--objects", "4", "--holdout", "0.25", "--context-fraction", "0.25"});
    REQUIRE_MESSAGE(g.code == 0, g.err);
    const auto t = cli({"train", "--out", model.string(), "--world", (world / "world.json").string(),
                        "--steps", "3", "--batch", "2", "--layers", "4", "--heads", "2", "--d-model",
                        "16", "--d-ff", "16"});
    REQUIRE_MESSAGE(t.code == 0, t.err);
  }
  std::vector<std::string> model_args() const {
    return {"--weights", (model / "weights.bin").string(), "--data", (world / "dataset.jsonl").string()};
  }
};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("cli exit codes") {
  TempDir tmp("cli_codes");
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"flow", "--help"}).code == kExitOk);
  CHECK(cli({"no-such-command"}).code == kExitUsage);
  CHECK(cli({"gen-world", "--bogus", "1"}).code == kExitUsage);
  CHECK(cli({"gen-world", "--entities", "many"}).code == kExitUsage);
  {
    std::ofstream(tmp.path / "cfg.json") << R"({"entites": 5})";
    CHECK(cli({"gen-world", "--config", (tmp.path / "cfg.json").string()}).code == kExitUsage);
    std::ofstream(tmp.path / "cfg2.json") << R"({"entities": "five"})";
    CHECK(cli({"gen-world", "--config", (tmp.path / "cfg2.json").string()}).code == kExitUsage);
  }
  const auto out = tmp.path / "fail";
  const auto r = cli({"flow", "--out", out.string(), "--weights", (tmp.path / "missing.bin").string(),
                      "--data", (tmp.path / "missing.jsonl").string()});
  CHECK(r.code == kExitRuntime);
  CHECK_FALSE(r.err.empty());
  CHECK_FALSE(std::filesystem::exists(out));
  // Invalid world sizes are runtime configuration errors.
  CHECK(cli({"gen-world", "--out", out.string(), "--objects", "1"}).code == kExitRuntime);
  CHECK_FALSE(std::filesystem::exists(out));
}

TEST_CASE("cli config precedence: defaults < config file < flags") {
  TempDir tmp("cli_cfg");
  std::ofstream(tmp.path / "cfg.json") << R"({"entities": 7, "relations": 2, "objects": 3, "seed": 5})";
  const auto a = tmp.path / "a", b = tmp.path / "b";
  REQUIRE(cli({"gen-world", "--config", (tmp.path / "cfg.json").string(), "--out", a.string()}).code == 0);
  REQUIRE(cli({"gen-world", "--config", (tmp.path / "cfg.json").string(), "--out", b.string(), "--seed",
               "9"})
              .code == 0);
  const auto ca = load_json(a / "run_config.json").at("run_config");
  const auto cb = load_json(b / "run_config.json").at("run_config");
  CHECK(ca.at("entities") == 7);
  CHECK(ca.at("seed") == 5);
  CHECK(ca.at("holdout") == 0.1);
  CHECK(cb.at("seed") == 9);
  CHECK(cb.at("entities") == 7);
  const auto w = load_json(a / "world.json");
  CHECK(w.at("facts").size() == 14);
}

TEST_CASE("cli end to end on a tiny world, with byte-identical replay") {
  Fixture fx;
  for (const char* f : {"weights.bin", "vocab.txt", "loss_curve.csv", "train_summary.json", "run_config.json"}) {
    CHECK(std::filesystem::exists(fx.model / f));
  }
  const auto f1 = fx.tmp.path / "flow";
  const auto flow_args = concat({"flow", "--tier", "positive", "--limit", "4", "--out", f1.string()},
                                fx.model_args());
  REQUIRE(cli(flow_args).code == 0);
  const std::string csv = slurp(f1 / "flow_profile.csv"), js = slurp(f1 / "flow_profile.json");
  REQUIRE(cli(flow_args).code == 0);
  CHECK(slurp(f1 / "flow_profile.csv") == csv);
  CHECK(slurp(f1 / "flow_profile.json") == js);
  const auto flow_json = load_json(f1 / "flow_profile.json");
  CHECK(flow_json.at("schema") == "raglab/1");
  CHECK(flow_json.at("n_layers") == 4);

  const auto st = fx.tmp.path / "stages";
  REQUIRE(cli({"stages", "--out", st.string(), "--profile", (f1 / "flow_profile.json").string(), "--method",
               "changepoint"})
              .code == 0);
  CHECK(load_json(st / "stages.json").at("method") == "changepoint");

  const auto ev = fx.tmp.path / "eval";
  REQUIRE(cli(concat({"eval", "--out", ev.string(), "--setting", "noisy"}, fx.model_args())).code == 0);
  CHECK(load_json(ev / "eval.json").at("results").size() == 1);

  const auto hm = fx.tmp.path / "heat";
  REQUIRE(cli(concat({"intervene", "--out", hm.string(), "--limit", "2", "--tiers", "positive,fake"},
                     fx.model_args()))
              .code == 0);
  CHECK(load_json(hm / "heatmap.json").at("cells").size() == 8);

  const auto kp = fx.tmp.path / "kape";
  REQUIRE(cli(concat({"kape", "--out", kp.string(), "--fraction", "0.01", "--min-raw", "0.2"},
                     fx.model_args()))
              .code == 0);
  const auto summary = load_json(kp / "kape_summary.json");
  CHECK(summary.at("fraction") == 0.01);
  CHECK(summary.at("min_raw") == 0.2);
  CHECK(summary.at("run_config").at("fraction") == 0.01);
  CHECK(summary.at("candidates") == 1);  // ceil(0.01 * 64)
  CHECK(std::filesystem::exists(kp / "kape_table.csv"));

  const auto de = fx.tmp.path / "deact";
  REQUIRE(cli(concat({"deactivate", "--out", de.string(), "--neurons", (kp / "kape_summary.json").string(),
                      "--settings", "closed_book"},
                     fx.model_args()))
              .code == 0);
  CHECK(load_json(de / "deactivation.json").at("results").size() == 3);

  const auto ll = fx.tmp.path / "lens";
  REQUIRE(cli(concat({"logitlens", "--out", ll.string()}, fx.model_args())).code == 0);
  CHECK(load_json(ll / "logit_lens.json").at("tier") == "fake");

  // A bad tier name is a runtime error and leaves nothing behind.
  const auto bad = fx.tmp.path / "bad";
  CHECK(cli(concat({"flow", "--out", bad.string(), "--tier", "nonsense"}, fx.model_args())).code ==
        kExitRuntime);
  CHECK_FALSE(std::filesystem::exists(bad));
}
