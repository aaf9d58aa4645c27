#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "pandagpt/bridge.hpp"
#include "pandagpt/checkpoint.hpp"
#include "pandagpt/cli.hpp"
#include "pandagpt/config.hpp"
#include "pandagpt/evalkit.hpp"
#include "test_util.hpp"

using namespace pgpt;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult run_cli(const std::vector<std::string>& args, const std::string& stdin_text = "") {
    std::istringstream in(stdin_text);
    std::ostringstream out, err;
    const int code = cli_dispatch(args, in, out, err);
    return {code, out.str(), err.str()};
}

// Tiny end-to-end workspace shared across the CLI tests.
struct TinyDir {
    std::string root;
    std::vector<std::string> overrides;

    TinyDir() {
        root = (std::filesystem::temp_directory_path() / "pgpt_cli_tiny").string();
        std::filesystem::remove_all(root);
        std::filesystem::create_directories(root);
        overrides = {
            "--set", "seed=777",
            "--set", "data.count=48",
            "--set", "data.path=" + root + "/train.txt",
            "--set", "binder.steps=60",
            "--set", "binder.scenes=72",
            "--set", "binder.holdout=16",
            "--set", "lm.steps=120",
            "--set", "lm.batch=8",
            "--set", "lm.corpus=400",
            "--set", "bridge.epochs=1",
            "--set", "bridge.log=" + root + "/bridge.tsv",
            "--set", "eval.scenes=6",
            "--set", "eval.pairs=10",
            "--set", "ckpt.binder=" + root + "/binder.ckpt",
            "--set", "ckpt.lm=" + root + "/lm.ckpt",
            "--set", "ckpt.bridge=" + root + "/bridge.ckpt",
            "--set", "report.path=" + root + "/report.tsv",
        };
    }

    std::vector<std::string> cmd(const std::string& sub) const {
        std::vector<std::string> args = {sub};
        args.insert(args.end(), overrides.begin(), overrides.end());
        return args;
    }
};

const TinyDir& tiny() {
    static TinyDir t = [] {
        TinyDir d;
        REQUIRE(run_cli(d.cmd("gen-data")).code == 0);
        REQUIRE(run_cli(d.cmd("train-binder")).code == 0);
        REQUIRE(run_cli(d.cmd("pretrain-lm")).code == 0);
        REQUIRE(run_cli(d.cmd("train-bridge")).code == 0);
        REQUIRE(run_cli(d.cmd("eval")).code == 0);
        return d;
    }();
    return t;
}

}  // namespace

TEST_CASE("usage errors exit 1 and name the problem") {
    const CliResult none = run_cli({});
    CHECK(none.code == 1);
    CHECK(none.err.find("usage:") != std::string::npos);

    const CliResult unknown = run_cli({"frobnicate"});
    CHECK(unknown.code == 1);
    CHECK(unknown.err.find("frobnicate") != std::string::npos);

    const CliResult bad_set = run_cli({"gen-data", "--set", "binder.lr=abc"});
    CHECK(bad_set.code == 1);
    CHECK(bad_set.err.find("binder.lr") != std::string::npos);

    const CliResult bad_key = run_cli({"gen-data", "--set", "nope=1"});
    CHECK(bad_key.code == 1);
    CHECK(bad_key.err.find("nope") != std::string::npos);

    const CliResult bad_flag = run_cli({"gen-data", "--frob"});
    CHECK(bad_flag.code == 1);
}

TEST_CASE("five-subcommand pipeline matches the single-process run byte for byte") {
    const TinyDir& d = tiny();
    const std::string cli_report = read_file(d.root + "/report.tsv");

    // Single-process mirror of the same pipeline at the same configuration.
    Config c;
    for (size_t i = 0; i + 1 < d.overrides.size(); i += 2) {
        if (d.overrides[i] != "--set") continue;
        const std::string& kv = d.overrides[i + 1];
        const size_t eq = kv.find('=');
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    const World world(seed);

    GenDataConfig gcfg;
    gcfg.seed = seed;
    gcfg.modality = modality_from_name(c.get_str("data.modality"));
    gcfg.count = static_cast<int>(c.get_int("data.count"));
    gcfg.compose_fraction = c.get_float("data.compose_fraction");
    gcfg.out_path = d.root + "/api_train.txt";
    gen_dataset(world, gcfg);
    CHECK(read_file(gcfg.out_path) == read_file(c.get_str("data.path")));

    BinderTrainConfig bcfg;
    bcfg.steps = static_cast<int>(c.get_int("binder.steps"));
    bcfg.lr = c.get_float("binder.lr");
    bcfg.batch = static_cast<int>(c.get_int("binder.batch"));
    bcfg.tau = c.get_float("binder.tau");
    bcfg.seed = seed;
    const ParamMap binder =
        train_binder(make_binder_pool(world, static_cast<int>(c.get_int("binder.scenes")), Rng(seed)),
                     bcfg, nullptr);

    LmPretrainConfig lcfg;
    lcfg.steps = static_cast<int>(c.get_int("lm.steps"));
    lcfg.lr = c.get_float("lm.lr");
    lcfg.batch = static_cast<int>(c.get_int("lm.batch"));
    lcfg.seed = seed;
    const ParamMap lm = pretrain_lm(make_text_corpus(static_cast<int>(c.get_int("lm.corpus")), Rng(seed)),
                                    lcfg, nullptr);

    const auto data = parse_dataset(read_file(c.get_str("data.path")));
    BridgeTrainConfig tcfg;
    tcfg.epochs = static_cast<int>(c.get_int("bridge.epochs"));
    tcfg.lr = c.get_float("bridge.lr");
    tcfg.batch = static_cast<int>(c.get_int("bridge.batch"));
    tcfg.seed = seed;
    const BridgeState bridge = train_bridge(data, binder, lm, tcfg, nullptr);

    // The trained tensors must match the checkpointed ones bit for bit.
    const Checkpoint binder_ck = load_checkpoint(c.get_str("ckpt.binder"));
    const Checkpoint lm_ck = load_checkpoint(c.get_str("ckpt.lm"));
    const Checkpoint bridge_ck = load_checkpoint(c.get_str("ckpt.bridge"));
    CHECK(params_checksum(binder) == params_checksum(binder_ck.tensors));
    CHECK(params_checksum(lm) == params_checksum(lm_ck.tensors));
    CHECK(params_checksum(bridge.t) == params_checksum(bridge_ck.tensors));

    FullReportConfig fcfg;
    fcfg.eval_scenes = static_cast<int>(c.get_int("eval.scenes"));
    fcfg.eval_pairs = static_cast<int>(c.get_int("eval.pairs"));
    fcfg.holdout = static_cast<int>(c.get_int("binder.holdout"));
    fcfg.seed = seed;
    std::map<std::string, std::string> header;
    header["config_fingerprint"] = c.fingerprint();
    {
        char buf[16];
        uint32_t crc = 0;
        load_checkpoint(c.get_str("ckpt.binder"), &crc);
        std::snprintf(buf, sizeof(buf), "%08x", crc);
        header["ckpt.binder_crc"] = buf;
        load_checkpoint(c.get_str("ckpt.lm"), &crc);
        std::snprintf(buf, sizeof(buf), "%08x", crc);
        header["ckpt.lm_crc"] = buf;
        load_checkpoint(c.get_str("ckpt.bridge"), &crc);
        std::snprintf(buf, sizeof(buf), "%08x", crc);
        header["ckpt.bridge_crc"] = buf;
    }
    const EvalReport rep =
        full_report(world, binder, lm, bridge, manifest_from_records(data), fcfg, std::move(header));
    CHECK(render_report(rep) == cli_report);
}

TEST_CASE("inspect-ckpt lists tensors and rewrites canonically") {
    const TinyDir& d = tiny();
    const CliResult res = run_cli({"inspect-ckpt", d.root + "/binder.ckpt"});
    CHECK(res.code == 0);
    CHECK(res.out.find("tensor binder/img/w1 [64x48]") != std::string::npos);
    CHECK(res.out.find("tensor binder/text/emb [64x32]") != std::string::npos);
    CHECK(res.out.find("meta audit.non_anchor_pairs=0") != std::string::npos);

    const CliResult rewrite =
        run_cli({"inspect-ckpt", d.root + "/binder.ckpt", "--rewrite", d.root + "/binder2.ckpt"});
    CHECK(rewrite.code == 0);
    CHECK(read_file(d.root + "/binder.ckpt") == read_file(d.root + "/binder2.ckpt"));

    // Corrupted checkpoint is an invariant violation: exit 2.
    std::string bytes = read_file(d.root + "/binder.ckpt");
    bytes[bytes.size() / 2] ^= 0x10;
    write_file(d.root + "/corrupt.ckpt", bytes);
    const CliResult corrupt = run_cli({"inspect-ckpt", d.root + "/corrupt.ckpt"});
    CHECK(corrupt.code == 2);
    CHECK(corrupt.err.find("CRC") != std::string::npos);
}

TEST_CASE("eval refuses mismatched lineage with exit 2") {
    const TinyDir& d = tiny();
    // Re-train the binder under a different seed; the bridge's recorded parent
    // CRC no longer matches.
    std::vector<std::string> args = d.cmd("train-binder");
    args.push_back("--set");
    args.push_back("seed=778");
    args.push_back("--set");
    args.push_back("ckpt.binder=" + d.root + "/binder_alt.ckpt");
    REQUIRE(run_cli(args).code == 0);

    std::vector<std::string> eval_args = d.cmd("eval");
    eval_args.push_back("--set");
    eval_args.push_back("ckpt.binder=" + d.root + "/binder_alt.ckpt");
    const CliResult res = run_cli(eval_args);
    CHECK(res.code == 2);
    CHECK(res.err.find("lineage") != std::string::npos);
}

TEST_CASE("compose subcommand prints a unit vector and the nearest concept") {
    const TinyDir& d = tiny();
    std::vector<std::string> args = d.cmd("compose");
    args.insert(args.end(), {"--item", "img:3:1", "--item", "aud:5:2"});
    const CliResult res = run_cli(args);
    CHECK(res.code == 0);
    CHECK(res.out.find("composed 2 embedding(s):") != std::string::npos);
    CHECK(res.out.find("nearest concept:") != std::string::npos);

    const CliResult rerun = run_cli(args);
    CHECK(rerun.out == res.out);

    std::vector<std::string> bad = d.cmd("compose");
    bad.insert(bad.end(), {"--item", "img:99:1"});
    CHECK(run_cli(bad).code == 1);
}

TEST_CASE("chat: scripted replay is byte-identical; bad commands keep the session alive") {
    const TinyDir& d = tiny();
    const std::string script =
        "/show img 3 1\n"
        "what is shown ?\n"
        "/add aud 5 2\n"
        "what is shown ?\n"
        "/nonsense\n"
        "/show bad 1 1\n"
        "/clear\n"
        "what is shown ?\n"
        "/seed 9\n"
        "/show img 3 1\n"
        "what is shown ?\n"
        "/quit\n";
    const CliResult a = run_cli(d.cmd("chat"), script);
    CHECK(a.code == 0);
    const CliResult b = run_cli(d.cmd("chat"), script);
    CHECK(a.out == b.out);
    CHECK(a.out.find("unknown command /nonsense") != std::string::npos);
    CHECK(a.out.find("usage: /show") != std::string::npos);
    CHECK(a.out.find("[prefix cleared]") != std::string::npos);

    // The unconditioned turn matches a direct empty-prefix generation.
    const Checkpoint lm_ck = load_checkpoint(d.root + "/lm.ckpt");
    const Checkpoint bridge_ck = load_checkpoint(d.root + "/bridge.ckpt");
    Rng dummy(0);
    BridgeState bridge = bridge_init(dummy);
    bridge.t = bridge_ck.tensors;
    const std::vector<int> expected = bridge_answer(
        lm_ck.tensors, bridge, nullptr, Vocab::instance().tokenize("what is shown ?"));
    CHECK(a.out.find("\n" + Vocab::instance().detokenize(expected) + "\n") != std::string::npos);
}

TEST_CASE("PANDAGPT_SEED environment variable overrides the config seed") {
    const std::string root = (std::filesystem::temp_directory_path() / "pgpt_env_seed").string();
    std::filesystem::remove_all(root);
    std::filesystem::create_directories(root);

    setenv("PANDAGPT_SEED", "31337", 1);
    const CliResult env_run = run_cli({"gen-data", "--set", "data.count=8", "--set",
                                       "data.path=" + root + "/env.txt"});
    unsetenv("PANDAGPT_SEED");
    CHECK(env_run.code == 0);

    const CliResult set_run = run_cli({"gen-data", "--set", "seed=31337", "--set", "data.count=8",
                                       "--set", "data.path=" + root + "/set.txt"});
    CHECK(set_run.code == 0);
    CHECK(read_file(root + "/env.txt") == read_file(root + "/set.txt"));

    const CliResult other = run_cli({"gen-data", "--set", "seed=1", "--set", "data.count=8",
                                     "--set", "data.path=" + root + "/other.txt"});
    CHECK(other.code == 0);
    CHECK(read_file(root + "/env.txt") != read_file(root + "/other.txt"));

    setenv("PANDAGPT_SEED", "notanumber", 1);
    const CliResult bad = run_cli({"gen-data"});
    unsetenv("PANDAGPT_SEED");
    CHECK(bad.code == 1);
    std::filesystem::remove_all(root);
}
