// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "smoe/allocator.hpp"
#include "smoe/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + SMOE_CLI_PATH + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Workdir {
 public:
  explicit Workdir(const std::string& name) : path_(fs::temp_directory_path() / ("smoe_cli_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~Workdir() { fs::remove_all(path_); }
  std::string operator/(const std::string& file) const { return (path_ / file).string(); }

 private:
  fs::path path_;
};

const std::string kToy = "--layers 2 --d-model 16 --heads 2 --d-ff 32 --vocab 32 --seq-len 16";

}  // namespace

TEST_CASE("usage errors exit with 2, help with 0") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("consistency").code == 2);
  CHECK(run("allocate --out x --strategy greedy").code == 2);
  CHECK(run("--help").code == 0);
  CHECK(run("train --help").code == 0);
  CHECK(run("train --help").out.find("--lr-floor") != std::string::npos);
}

TEST_CASE("missing and malformed files exit with 3") {
  Workdir dir("io");
  CHECK(run("consistency " + dir / "nope.plan " + dir / "nope.plan").code == 3);
  std::ofstream(dir / "junk.plan") << "not a plan\n";
  CHECK(run("consistency " + dir / "junk.plan " + dir / "junk.plan").code == 3);
  CHECK(run("init --out " + dir / "missing-dir/base.ckpt").code == 3);
}

TEST_CASE("contract violations exit with 2") {
  Workdir dir("contract");
  REQUIRE(run("init " + kToy + " --out " + dir / "base.ckpt").code == 0);
  REQUIRE(run("profile --model " + dir / "base.ckpt --out " + dir / "p.prof").code == 0);
  CHECK(run("allocate --profile " + dir / "p.prof --budget 0 --out " + dir / "a.plan").code == 2);
  CHECK(run("allocate --profile " + dir / "p.prof --budget 1.5 --out " + dir / "a.plan").code == 2);
  CHECK(run("allocate --strategy mola --layers 6 --out " + dir / "a.plan").code == 2);
  CHECK(run("profile --model " + dir / "base.ckpt --samples 5 --out " + dir / "q.prof").code == 2);
  CHECK(run("profile --model " + dir / "base.ckpt --task sort --out " + dir / "q.prof").code == 2);
  REQUIRE(run("init --layers 4 --out " + dir / "other.ckpt").code == 0);
  CHECK(run("allocate --profile " + dir / "p.prof --model " + dir / "other.ckpt --out " + dir / "a.plan").code == 2);
  CHECK(run("init --out " + dir / "seeded.ckpt", "SMOE_SEED=abc").code == 2);
}

TEST_CASE("consistency and accounting reports") {
  Workdir dir("reports");
  REQUIRE(run("init " + kToy + " --out " + dir / "base.ckpt").code == 0);
  REQUIRE(run("profile --model " + dir / "base.ckpt --task reverse --out " + dir / "p.prof").code == 0);
  REQUIRE(run("allocate --profile " + dir / "p.prof --strategy unified --budget 1.0 --out " + dir / "u.plan").code == 0);
  REQUIRE(run("allocate --model " + dir / "base.ckpt --strategy hydralora --out " + dir / "h.plan").code == 0);
  REQUIRE(run("allocate --profile " + dir / "p.prof --strategy separate --budget 0.5 --out " + dir / "s.plan").code == 0);

  CHECK(run("consistency " + dir / "s.plan " + dir / "s.plan").out == "100.0\n");
  CHECK(run("consistency " + dir / "u.plan " + dir / "h.plan").out == "100.0\n");
  // Separate at 0.5 keeps round(0.5*8) + round(0.5*6) = 4 + 3 of 14 blocks.
  CHECK(run("consistency " + dir / "s.plan " + dir / "h.plan").out == "50.0\n");

  const Result acc = run("account --plan " + dir / "h.plan --model " + dir / "base.ckpt");
  REQUIRE(acc.code == 0);
  const smoe::AllocationPlan plan = smoe::load_plan(fs::path(dir / "h.plan"));
  const smoe::ModelConfig config = smoe::load_model(fs::path(dir / "base.ckpt")).config;
  const double expected = smoe::trainable_fraction(plan, config, plan.rank).fraction;
  const auto pos = acc.out.find("tuned_total ");
  REQUIRE(pos != std::string::npos);
  CHECK(std::abs(std::stod(acc.out.substr(pos + 12)) - expected) < 5e-5);

  const Result heat = run("report-heatmap --profile " + dir / "p.prof");
  CHECK(heat.out.starts_with("layer,Q,K,V,O,Up,Down,Gate\n0,"));
}

TEST_CASE("profile, allocate and train are byte-reproducible; SMOE_SEED overrides seeds") {
  Workdir dir("determinism");
  auto pipeline = [&](const std::string& tag, const std::string& env) {
    REQUIRE(run("init " + kToy + " --seed 5 --out " + dir / (tag + ".ckpt"), env).code == 0);
    REQUIRE(run("profile --model " + dir / (tag + ".ckpt") + " --task copy --out " + dir / (tag + ".prof"), env).code == 0);
    REQUIRE(run("allocate --profile " + dir / (tag + ".prof") + " --strategy separate --budget 0.6 --out " +
                    dir / (tag + ".plan"),
                env)
                .code == 0);
    REQUIRE(run("train --model " + dir / (tag + ".ckpt") + " --plan " + dir / (tag + ".plan") +
                    " --steps 8 --lr 1e-2 --lr-floor 1e-3 --out " + dir / (tag + ".adpt") + " --metrics " +
                    dir / (tag + ".csv") + " --summary " + dir / (tag + ".txt"),
                env)
                .code == 0);
  };
  pipeline("a", "");
  pipeline("b", "");
  pipeline("c", "SMOE_SEED=5");
  pipeline("d", "SMOE_SEED=6");
  for (const char* ext : {".ckpt", ".prof", ".plan", ".csv", ".adpt"}) {
    CAPTURE(ext);
    const std::string a = slurp(dir / (std::string("a") + ext));
    CHECK_FALSE(a.empty());
    CHECK(a == slurp(dir / (std::string("b") + ext)));
  }
  // The data seed defaults to 0, so SMOE_SEED=5 changes the task data but not the model.
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "c.ckpt"));
  CHECK(slurp(dir / "a.prof") != slurp(dir / "c.prof"));
  CHECK(slurp(dir / "c.ckpt") != slurp(dir / "d.ckpt"));
  CHECK(slurp(dir / "a.txt").find("wall_seconds") != std::string::npos);
  CHECK(slurp(dir / "a.csv").starts_with("step,lr,loss\n0,0.01,"));
}
