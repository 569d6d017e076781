// End-to-end checks of the command-line surface: run the real binary, inspect
// exit codes, artifacts and determinism.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <json.hpp>

#include "msr/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string kCli = MSR_CLI_PATH;

struct RunResult {
  int exit_code = -1;
  std::string out;
};

RunResult run(const std::string& args, const std::string& stdin_file = "") {
  const std::string out_file =
      (fs::temp_directory_path() / ("msr_cli_out_" + std::to_string(std::rand()))).string();
  std::string cmd = kCli + " " + args;
  if (!stdin_file.empty()) cmd += " < " + stdin_file;
  cmd += " > " + out_file + " 2>/dev/null";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WEXITSTATUS(raw);
  std::ifstream in(out_file, std::ios::binary);
  r.out.assign((std::istreambuf_iterator<char>(in)), {});
  fs::remove(out_file);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() /
           ("msr_cli_ws_" + std::to_string(std::random_device{}()));
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string dir(const std::string& name) const {
    fs::create_directories(root / name);
    return (root / name).string();
  }
};

const std::string kSmallGen =
    " --source-rows 900 --target-rows 240 --ctx-len 4 --seed 11";
const std::string kSmallModel =
    " --embed-dim 8 --mem-rows 4 --mem-cols 4 --read-heads 2 --batch 64";

}  // namespace

TEST_CASE("usage errors exit 1, runtime failures exit 2") {
  CHECK(run("no-such-command").exit_code == 1);
  CHECK(run("train-mv --city BJ").exit_code == 1);  // missing required flags
  Workspace ws;
  CHECK(run("train-mv --data " + ws.dir("none") + " --ckpt " + ws.dir("ck") +
            " --city BJ")
            .exit_code == 2);  // dataset file absent
}

TEST_CASE("gen-data reruns are byte-identical and the manifest is complete") {
  Workspace ws;
  const std::string d1 = ws.dir("a"), d2 = ws.dir("b");
  CHECK(run("gen-data --out " + d1 + kSmallGen).exit_code == 0);
  CHECK(run("gen-data --out " + d2 + kSmallGen).exit_code == 0);

  const char* cities[] = {"BJ", "SZ", "SH", "CD", "DZ", "ZZ"};
  for (const char* c : cities) {
    const std::string f = std::string(c) + ".jsonl";
    REQUIRE(fs::exists(fs::path(d1) / f));
    CHECK(slurp(fs::path(d1) / f) == slurp(fs::path(d2) / f));
  }
  CHECK(slurp(fs::path(d1) / "manifest.json") == slurp(fs::path(d2) / "manifest.json"));

  json manifest = json::parse(slurp(fs::path(d1) / "manifest.json"));
  CHECK(manifest.at("cities").size() == 6);
  CHECK(manifest.at("seed") == 11);

  // a different seed changes the data
  const std::string d3 = ws.dir("c");
  CHECK(run("gen-data --out " + d3 +
            " --source-rows 900 --target-rows 240 --ctx-len 4 --seed 12")
            .exit_code == 0);
  CHECK(slurp(fs::path(d1) / "DZ.jsonl") != slurp(fs::path(d3) / "DZ.jsonl"));
}

TEST_CASE("train, eval, export, kd and serve work end to end") {
  Workspace ws;
  const std::string data = ws.dir("data"), ckpt = ws.dir("ckpt");
  REQUIRE(run("gen-data --out " + data + kSmallGen).exit_code == 0);

  // deterministic retrain: checkpoints must match byte for byte
  const std::string train_dz = "train-mv --data " + data + " --ckpt " + ckpt +
                               " --city DZ --seed 3 --epochs 2" + kSmallModel;
  REQUIRE(run(train_dz).exit_code == 0);
  const std::string ck1 = slurp(fs::path(ckpt) / "DZ.ckpt");
  REQUIRE(run(train_dz).exit_code == 0);
  CHECK(slurp(fs::path(ckpt) / "DZ.ckpt") == ck1);

  // history log schema
  {
    std::ifstream h(fs::path(ckpt) / "DZ.history.jsonl");
    std::string line;
    REQUIRE(std::getline(h, line));
    json e = json::parse(line);
    CHECK(e.contains("epoch"));
    CHECK(e.contains("loss"));
    CHECK(e.contains("val_auc"));
    CHECK(e.contains("val_rmse"));
    CHECK(e.contains("secs"));
  }

  // eval emits metrics json
  {
    auto r = run("eval --ckpt " + ckpt + " --city DZ --data " + data + " --split test");
    REQUIRE(r.exit_code == 0);
    json m = json::parse(r.out);
    CHECK(m.at("city") == "DZ");
    CHECK(m.at("model") == "mv");
    CHECK(m.at("n").get<int>() == 24);
    CHECK(m.at("rmse").get<double>() >= 0.0);
  }

  // ablation metadata flows through eval
  REQUIRE(run("train-mv --data " + data + " --ckpt " + ws.dir("ck_s3") +
              " --city DZ --seed 3 --epochs 1 --ablate s3" + kSmallModel)
              .exit_code == 0);
  {
    auto r = run("eval --ckpt " + ws.dir("ck_s3") + " --city DZ --data " + data +
                 " --split test");
    REQUIRE(r.exit_code == 0);
    CHECK(json::parse(r.out).at("ablation") == "s3");
  }

  // export source memories, then distill
  for (const std::string c : {"BJ", "SZ"}) {
    REQUIRE(run("train-mv --data " + data + " --ckpt " + ckpt + " --city " + c +
                " --seed 3 --epochs 1" + kSmallModel)
                .exit_code == 0);
    REQUIRE(run("export-memory --ckpt " + ckpt + " --city " + c).exit_code == 0);
    CHECK(fs::exists(fs::path(ckpt) / (c + ".mem")));
  }
  REQUIRE(run("train-kd --data " + data + " --ckpt " + ckpt +
              " --city DZ --sources BJ,SZ --seed 5 --epochs 2" + kSmallModel)
              .exit_code == 0);
  CHECK(fs::exists(fs::path(ckpt) / "DZ.teacher.ckpt"));
  CHECK(fs::exists(fs::path(ckpt) / "DZ.student.ckpt"));

  // kd history carries both branches and the loss weights
  {
    std::ifstream h(fs::path(ckpt) / "DZ.kd_history.jsonl");
    std::string line;
    REQUIRE(std::getline(h, line));
    json e = json::parse(line);
    CHECK(e.contains("teacher_val_auc"));
    CHECK(e.contains("student_val_auc"));
    CHECK(e.contains("mean_cos"));
    CHECK(e.at("alpha").get<double>() >= 0.01);
  }

  // serve: well-formed requests answered, malformed lines survive
  {
    const fs::path reqs = ws.root / "reqs.txt";
    std::ofstream rf(reqs);
    std::ifstream df(fs::path(data) / "DZ.jsonl");
    std::string line;
    for (int i = 0; i < 3 && std::getline(df, line); ++i) {
      json o = json::parse(line);
      o.erase("label");
      o.erase("latent");
      rf << o.dump() << "\n";
    }
    rf << "not json at all\n";
    rf << "{\"pair_id\": \"x\"}\n";  // schema error
    rf.close();

    auto r = run("serve --ckpt " + ckpt + " --city DZ --model student" +
                     " --transport stdio",
                 reqs.string());
    REQUIRE(r.exit_code == 0);
    std::istringstream out(r.out);
    int ok = 0, err = 0;
    while (std::getline(out, line)) {
      json o = json::parse(line);
      if (o.contains("msr")) {
        const double y = o.at("msr").get<double>();
        CHECK(y > 0.0);
        CHECK(y < 1.0);
        ++ok;
      } else {
        CHECK(o.contains("error"));
        ++err;
      }
    }
    CHECK(ok == 3);
    CHECK(err == 2);
  }

  // eval on the kd artifacts
  {
    auto r = run("eval --ckpt " + (fs::path(ckpt) / "DZ.student.ckpt").string() +
                 " --data " + data + " --split test");
    REQUIRE(r.exit_code == 0);
    CHECK(json::parse(r.out).at("model") == "student");
  }
}

TEST_CASE("serve survives heavy malformed-input fuzzing") {
  Workspace ws;
  const std::string data = ws.dir("data"), ckpt = ws.dir("ckpt");
  REQUIRE(run("gen-data --out " + data +
              " --source-rows 300 --target-rows 240 --ctx-len 3 --seed 2")
              .exit_code == 0);
  REQUIRE(run("train-mv --data " + data + " --ckpt " + ckpt +
              " --city DZ --seed 3 --epochs 1" + kSmallModel)
              .exit_code == 0);

  const fs::path reqs = ws.root / "fuzz.txt";
  {
    std::ofstream rf(reqs, std::ios::binary);
    auto rng = msr::make_rng(99);
    std::uniform_int_distribution<int> len(1, 120);
    std::uniform_int_distribution<int> byte(1, 255);  // no NULs, keep it a text stream
    for (int i = 0; i < 1000; ++i) {
      const int n = len(rng);
      std::string garbage;
      for (int k = 0; k < n; ++k) {
        char c = static_cast<char>(byte(rng));
        if (c == '\n') c = ' ';
        garbage.push_back(c);
      }
      rf << garbage << "\n";
    }
    // one good request at the end proves the loop is still alive
    std::ifstream df(fs::path(data) / "DZ.jsonl");
    std::string line;
    std::getline(df, line);
    json o = json::parse(line);
    o.erase("label");
    o.erase("latent");
    rf << o.dump() << "\n";
  }

  auto r = run("serve --ckpt " + ckpt + " --city DZ --model mv --transport stdio",
               reqs.string());
  REQUIRE(r.exit_code == 0);
  // every line answered; the last one is a real prediction
  std::istringstream out(r.out);
  std::string line, last;
  std::size_t lines = 0;
  while (std::getline(out, line)) {
    ++lines;
    last = line;
  }
  CHECK(lines == 1001);
  json final_reply = json::parse(last);
  REQUIRE(final_reply.contains("msr"));
  CHECK(final_reply.at("msr").get<double>() > 0.0);
  CHECK(final_reply.at("msr").get<double>() < 1.0);
}
