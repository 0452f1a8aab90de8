// End-to-end exercise of the installed CLI surface: subcommands, config
// loading, exit codes, artifact layout, determinism across reruns.
//
// argv[1] = path to the kvguard binary, argv[2] = scratch directory.

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void check(bool ok, const std::string& what) {
    std::cout << (ok ? "[ok] " : "[FAILED] ") << what << "\n";
    if (!ok) ++g_failures;
}

std::string g_binary;
fs::path g_scratch;

// Runs the CLI with the given arguments, stdout/stderr into a log file, and
// returns the process exit code (-1 if it did not exit normally).
int run_cli(const std::string& args) {
    static int invocation = 0;
    fs::path log = g_scratch / ("cli_" + std::to_string(invocation++) + ".log");
    std::string cmd = "\"" + g_binary + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    int status = std::system(cmd.c_str());
    if (status == -1 || !WIFEXITED(status)) return -1;
    return WEXITSTATUS(status);
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream f(p, std::ios::trunc);
    f << content;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Small everything: the CLI contract is what is under test, not the physics.
const char* kTinyConfig = R"({
  "model": {"vocab_size": 64, "hidden_dim": 32, "head_dim": 8, "max_new_tokens": 8},
  "n_blocks": 96,
  "block_size": 8,
  "workload": {"prefix_tokens": 16, "suffix_min": 2, "suffix_max": 6},
  "model_seeds": [1],
  "trials": 2,
  "concurrency": [1, 2],
  "threads": 1
})";

}  // namespace

int main(int argc, char** argv) {
    if (argc < 3) {
        std::cerr << "usage: test_cli_main <kvguard-binary> <scratch-dir>\n";
        return 2;
    }
    g_binary = argv[1];
    g_scratch = argv[2];
    fs::remove_all(g_scratch);
    fs::create_directories(g_scratch);

    fs::path cfg = g_scratch / "tiny.json";
    write_file(cfg, kTinyConfig);

    // happy path: artifacts appear, exit 0
    fs::path out1 = g_scratch / "nf1";
    int rc = run_cli("noise-floor --config \"" + cfg.string() + "\" --out \"" + out1.string() +
                     "\"");
    check(rc == 0, "noise-floor exits 0");
    check(fs::exists(out1 / "summary.json"), "summary.json written");
    check(fs::exists(out1 / "trials.csv"), "trials.csv written");

    // rerun elsewhere: data artifacts are byte-identical
    fs::path out2 = g_scratch / "nf2";
    rc = run_cli("noise-floor --config \"" + cfg.string() + "\" --out \"" + out2.string() +
                 "\"");
    check(rc == 0, "noise-floor rerun exits 0");
    check(slurp(out1 / "trials.csv") == slurp(out2 / "trials.csv"),
          "trials.csv identical across reruns");

    // a different --seed changes the trial stream.  Control trials are
    // seed-invariant by construction (all-zero rows), so probe with a tiny
    // injection sweep whose damage metrics track the workload seed.
    fs::path seed_cfg = g_scratch / "tiny_scan.json";
    write_file(seed_cfg, R"({
  "model": {"vocab_size": 64, "hidden_dim": 32, "head_dim": 8, "max_new_tokens": 8},
  "n_blocks": 96,
  "block_size": 8,
  "workload": {"prefix_tokens": 16, "suffix_min": 2, "suffix_max": 6},
  "model_seeds": [1],
  "bits": [14],
  "trials": 2,
  "concurrency": [1, 2],
  "threads": 1
})");
    fs::path sc1 = g_scratch / "scan_s1";
    rc = run_cli("scan-bits --config \"" + seed_cfg.string() + "\" --out \"" + sc1.string() +
                 "\"");
    check(rc == 0, "scan-bits exits 0");
    fs::path sc7 = g_scratch / "scan_s7";
    rc = run_cli("scan-bits --config \"" + seed_cfg.string() + "\" --out \"" + sc7.string() +
                 "\" --seed 7");
    check(rc == 0, "scan-bits with --seed exits 0");
    check(slurp(sc1 / "trials.csv") != slurp(sc7 / "trials.csv"),
          "--seed override reaches the trial stream");

    // config errors exit 2: unknown key, and a countermeasure experiment
    // explicitly forced off
    fs::path bad = g_scratch / "bad.json";
    write_file(bad, R"({"trails": 3})");
    rc = run_cli("noise-floor --config \"" + bad.string() + "\" --out \"" +
                 (g_scratch / "nf_bad").string() + "\"");
    check(rc == 2, "unknown config key exits 2");

    rc = run_cli("detect --config \"" + cfg.string() + "\" --out \"" +
                 (g_scratch / "det_off").string() + "\" --integrity off");
    check(rc == 2, "detect with --integrity off exits 2");

    // usage errors (missing required --out) are nonzero but not our codes
    rc = run_cli("noise-floor --config \"" + cfg.string() + "\"");
    check(rc != 0, "missing --out rejected");

    // violated experiment guarantee exits 3 (deliberate sabotage hook)
    fs::path sab = g_scratch / "sabotage.json";
    std::string sab_cfg = kTinyConfig;
    sab_cfg.insert(sab_cfg.rfind('}'), R"(, "sabotage": true)");
    write_file(sab, sab_cfg);
    rc = run_cli("noise-floor --config \"" + sab.string() + "\" --out \"" +
                 (g_scratch / "nf_sab").string() + "\"");
    check(rc == 3, "sabotaged noise floor exits 3");

    // descriptor runner: outputs.jsonl plus both dumps
    fs::path desc = g_scratch / "desc.json";
    write_file(desc, R"({
      "model": {"vocab_size": 64, "hidden_dim": 32, "head_dim": 8, "max_new_tokens": 8},
      "geometry": {"n_blocks": 32, "block_size": 8},
      "integrity": {"enabled": true},
      "requests": [
        {"request_id": 1, "prefix_tokens": [1,2,3,4,5,6,7,8], "suffix_tokens": [9, 10]},
        {"request_id": 2, "prefix_tokens": [1,2,3,4,5,6,7,8], "suffix_tokens": [11]}
      ]
    })");
    fs::path run_out = g_scratch / "run1";
    fs::path kv_dir = g_scratch / "kv";
    fs::path pool_file = g_scratch / "pool.json";
    rc = run_cli("run --descriptor \"" + desc.string() + "\" --out \"" + run_out.string() +
                 "\" --dump-kv \"" + kv_dir.string() + "\" --dump-pool \"" +
                 pool_file.string() + "\"");
    check(rc == 0, "run subcommand exits 0");
    check(fs::exists(run_out / "outputs.jsonl"), "outputs.jsonl written");
    check(fs::exists(run_out / "summary.json"), "run summary written");
    check(fs::exists(kv_dir / "layer_0.bin") && fs::exists(kv_dir / "geometry.json"),
          "raw cache dump written");
    check(fs::exists(pool_file), "pool state dump written");
    std::string jsonl = slurp(run_out / "outputs.jsonl");
    check(std::count(jsonl.begin(), jsonl.end(), '\n') == 2, "one JSONL line per request");
    check(jsonl.find("\"served_from_cache\":[true]") != std::string::npos,
          "second request shows the shared-prefix hit");

    // malformed descriptor exits 2
    fs::path broken = g_scratch / "broken.json";
    write_file(broken, R"({"requests": [{"request_id": 1}]})");
    rc = run_cli("run --descriptor \"" + broken.string() + "\" --out \"" +
                 (g_scratch / "run_bad").string() + "\"");
    check(rc == 2, "malformed descriptor exits 2");

    std::cout << (g_failures == 0 ? "cli: all checks passed\n"
                                  : "cli: " + std::to_string(g_failures) + " checks FAILED\n");
    return g_failures == 0 ? 0 : 1;
}
