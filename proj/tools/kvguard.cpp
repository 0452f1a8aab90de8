// kvguard CLI: experiment commands over the fault-injection harness plus a
// raw engine runner. Exit codes: 0 ok, 2 config error, 3 violated guarantee.

#include "kvguard/experiments.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <string>

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    uint64_t seed = 0;
    bool seed_set = false;
    std::string integrity;  // "on" | "off" | ""
    uint64_t ttl = 0;
    bool ttl_set = false;
    int threads = -1;
    bool plots = false;
};

nlohmann::json load_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw kvguard::ConfigError(std::string("cannot open ") + what + " " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw kvguard::ConfigError(std::string("invalid JSON in ") + path + ": " + e.what());
    }
}

kvguard::ExperimentConfig build_config(const std::string& experiment, const CommonOpts& opts) {
    nlohmann::json j = nlohmann::json::object();
    if (!opts.config_path.empty()) {
        j = load_json_file(opts.config_path, "config");
        if (!j.is_object()) throw kvguard::ConfigError("config root must be a JSON object");
    }
    if (opts.seed_set) j["seed"] = opts.seed;
    if (!opts.integrity.empty()) j["integrity"]["enabled"] = (opts.integrity == "on");
    if (opts.ttl_set) j["integrity"]["ttl"] = opts.ttl;
    if (opts.threads >= 0) j["threads"] = opts.threads;
    if (opts.plots) j["plots"] = true;
    kvguard::ExperimentConfig cfg = kvguard::make_config(experiment, j);
    cfg.out_dir = opts.out_dir;
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON config file (defaults if omitted)");
    cmd->add_option("--out", opts.out_dir, "output directory")->required();
    cmd->add_option("--seed", opts.seed, "top-level seed override")
        ->each([&opts](const std::string&) { opts.seed_set = true; });
    cmd->add_option("--integrity", opts.integrity, "countermeasure on|off")
        ->check(CLI::IsMember({"on", "off"}));
    cmd->add_option("--ttl", opts.ttl, "TTL in served hits (enables the TTL arm)")
        ->each([&opts](const std::string&) { opts.ttl_set = true; });
    cmd->add_option("--threads", opts.threads, "worker threads (0 = hardware)");
    cmd->add_flag("--plots", opts.plots, "also write SVG charts");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deterministic KV-cache fault-injection lab"};
    app.require_subcommand(1);

    CommonOpts opts;
    using Runner = std::function<nlohmann::json(const kvguard::ExperimentConfig&)>;
    struct Cmd {
        const char* name;
        const char* help;
        Runner run;
    };
    const Cmd experiment_cmds[] = {
        {"scan-bits", "bit-position x concurrency injection sweep", kvguard::cmd_scan_bits},
        {"selective", "two-group isolation check (shared vs disjoint prefix)",
         kvguard::cmd_selective},
        {"persistence", "per-request corruption tracking over N sequential requests",
         kvguard::cmd_persistence},
        {"detect", "countermeasure coverage: replay, TOCTOU window, exhaustive sweep",
         kvguard::cmd_detect},
        {"overhead", "throughput with the countermeasure off vs on", kvguard::cmd_overhead},
        {"noise-floor", "control trials; any divergence is a framework bug",
         kvguard::cmd_noise_floor},
    };
    Runner selected;
    for (const auto& c : experiment_cmds) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, opts);
        sub->callback([&selected, &c] { selected = c.run; });
    }

    std::string descriptor_path, run_out, dump_kv, dump_pool;
    CLI::App* run_cmd = app.add_subcommand("run", "execute a JSON request descriptor");
    run_cmd->add_option("--descriptor", descriptor_path, "engine descriptor JSON")->required();
    run_cmd->add_option("--out", run_out, "output directory")->required();
    run_cmd->add_option("--dump-kv", dump_kv, "directory for raw per-layer cache dumps");
    run_cmd->add_option("--dump-pool", dump_pool, "file for the block-pool state JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            nlohmann::json desc = load_json_file(descriptor_path, "descriptor");
            kvguard::run_descriptor(desc, run_out, dump_kv, dump_pool);
            std::printf("wrote %s/outputs.jsonl\n", run_out.c_str());
            return 0;
        }
        kvguard::ExperimentConfig cfg =
            build_config(app.get_subcommands().front()->get_name(), opts);
        selected(cfg);
        std::printf("wrote %s/summary.json\n", cfg.out_dir.c_str());
        return 0;
    } catch (const kvguard::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const kvguard::AssertionError& e) {
        std::fprintf(stderr, "guarantee violated: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
