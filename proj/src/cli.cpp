#include "pandagpt/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "pandagpt/bridge.hpp"
#include "pandagpt/checkpoint.hpp"
#include "pandagpt/composer.hpp"
#include "pandagpt/config.hpp"
#include "pandagpt/evalkit.hpp"
#include "pandagpt/vocab.hpp"

namespace pgpt {

namespace {

constexpr const char* kUsage =
    "usage: pandagpt <subcommand> [--config <path>] [--set key=value]... [options]\n"
    "\n"
    "subcommands:\n"
    "  gen-data        generate the grounded conversation dataset\n"
    "  train-binder    train and freeze the joint embedding space\n"
    "  pretrain-lm     pre-train and freeze the language model\n"
    "  train-bridge    train the projection + LoRA bridge on the frozen stack\n"
    "  eval            run all evaluations and write the report\n"
    "  compose         combine rendered samples into one embedding\n"
    "                  (--item mod:obj:attr ... [--weights w1,w2,...] [--raw-sum])\n"
    "  chat            interactive REPL over the trained checkpoints\n"
    "  inspect-ckpt    list a checkpoint's metadata and tensors\n"
    "                  (<path> [--rewrite <path>])\n";

std::string hex32(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", v);
    return buf;
}

void ensure_parent_dir(const std::string& path) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

struct ParsedArgs {
    std::string subcommand;
    Config config;
    std::vector<std::string> items;       // compose --item
    std::string weights;                  // compose --weights
    bool raw_sum = false;                 // compose --raw-sum
    std::string rewrite_path;             // inspect-ckpt --rewrite
    std::vector<std::string> positional;  // inspect-ckpt path
};

ParsedArgs parse_args(const std::vector<std::string>& args) {
    ParsedArgs p;
    if (args.empty()) throw UsageError("missing subcommand");
    p.subcommand = args[0];
    auto next = [&](size_t& i, const char* flag) -> const std::string& {
        if (i + 1 >= args.size()) throw UsageError(std::string(flag) + " requires a value");
        return args[++i];
    };
    for (size_t i = 1; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a == "--config") {
            p.config = Config::load(next(i, "--config"));
        } else if (a == "--set") {
            const std::string& kv = next(i, "--set");
            const size_t eq = kv.find('=');
            if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
            p.config.set(kv.substr(0, eq), kv.substr(eq + 1));
        } else if (a == "--item") {
            p.items.push_back(next(i, "--item"));
        } else if (a == "--weights") {
            p.weights = next(i, "--weights");
        } else if (a == "--raw-sum") {
            p.raw_sum = true;
        } else if (a == "--rewrite") {
            p.rewrite_path = next(i, "--rewrite");
        } else if (!a.empty() && a[0] == '-') {
            throw UsageError("unknown option '" + a + "'");
        } else {
            p.positional.push_back(a);
        }
    }
    if (const char* env = std::getenv("PANDAGPT_SEED")) {
        p.config.set("seed", env);  // overrides the config seed
    }
    return p;
}

uint32_t dataset_crc(const std::string& path) {
    const std::string bytes = read_file(path);
    return crc32(bytes.data(), bytes.size());
}

// ---- subcommands ----

int cmd_gen_data(const ParsedArgs& p, std::ostream& out) {
    const Config& c = p.config;
    GenDataConfig gcfg;
    gcfg.seed = static_cast<uint64_t>(c.get_int("seed"));
    gcfg.modality = modality_from_name(c.get_str("data.modality"));
    gcfg.count = static_cast<int>(c.get_int("data.count"));
    gcfg.compose_fraction = c.get_float("data.compose_fraction");
    gcfg.out_path = c.get_str("data.path");
    if (gcfg.count <= 0) throw UsageError("data.count must be positive");
    ensure_parent_dir(gcfg.out_path);
    const World world(gcfg.seed);
    gen_dataset(world, gcfg);
    out << "wrote " << gcfg.count << " records to " << gcfg.out_path << " (crc32 "
        << hex32(dataset_crc(gcfg.out_path)) << ")\n";
    return 0;
}

int cmd_train_binder(const ParsedArgs& p, std::ostream& out) {
    const Config& c = p.config;
    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    const World world(seed);
    const BinderPool pool = make_binder_pool(world, static_cast<int>(c.get_int("binder.scenes")), Rng(seed));
    BinderTrainConfig bcfg;
    bcfg.steps = static_cast<int>(c.get_int("binder.steps"));
    bcfg.lr = c.get_float("binder.lr");
    bcfg.batch = static_cast<int>(c.get_int("binder.batch"));
    bcfg.tau = c.get_float("binder.tau");
    bcfg.seed = seed;
    BinderTrainReport rep;
    const ParamMap params = train_binder(pool, bcfg, &rep);
    const uint32_t frozen = params_checksum(params);

    const int holdout = static_cast<int>(c.get_int("binder.holdout"));
    const RetrievalSides sides = make_retrieval_sides(world, params, holdout, Rng(seed).child("eval", 0));

    Checkpoint ck;
    ck.tensors = params;
    ck.meta["kind"] = "binder";
    ck.meta["seed"] = std::to_string(seed);
    ck.meta["config_fingerprint"] = c.fingerprint();
    ck.meta["frozen_checksum"] = hex32(frozen);
    ck.meta["audit.non_anchor_pairs"] = std::to_string(rep.audit.non_anchor_pairs());
    for (int side = 0; side < 7; ++side) {
        if (side == static_cast<int>(Modality::img)) continue;
        const std::string name = std::string("audit.img_") + retrieval_side_name(side);
        ck.meta[name] = std::to_string(
            rep.audit.counts[static_cast<size_t>(Modality::img)][static_cast<size_t>(side)]);
    }
    char buf[64];
    for (int a = 0; a < 7; ++a) {
        for (int b = a + 1; b < 7; ++b) {
            std::snprintf(buf, sizeof(buf), "%.6f", retrieval_pair_r1(sides, a, b));
            ck.meta[std::string("retrieval.") + retrieval_side_name(a) + "_" + retrieval_side_name(b)] = buf;
        }
    }
    const std::string path = c.get_str("ckpt.binder");
    ensure_parent_dir(path);
    const uint32_t crc = save_checkpoint(ck, path);
    out << "binder frozen: " << path << " (crc32 " << hex32(crc) << ")\n";
    out << "  final loss " << (rep.losses.empty() ? 0.0 : rep.losses.back()) << ", non-anchor pairs "
        << rep.audit.non_anchor_pairs() << "\n";
    out << "  held-out R@1 img-text " << ck.meta["retrieval.img_text"] << ", text-aud "
        << ck.meta["retrieval.aud_text"] << "\n";
    return 0;
}

int cmd_pretrain_lm(const ParsedArgs& p, std::ostream& out) {
    const Config& c = p.config;
    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    const auto corpus = make_text_corpus(static_cast<int>(c.get_int("lm.corpus")), Rng(seed));
    LmPretrainConfig pcfg;
    pcfg.steps = static_cast<int>(c.get_int("lm.steps"));
    pcfg.lr = c.get_float("lm.lr");
    pcfg.batch = static_cast<int>(c.get_int("lm.batch"));
    pcfg.seed = seed;
    LmPretrainReport rep;
    const ParamMap params = pretrain_lm(corpus, pcfg, &rep);

    Checkpoint ck;
    ck.tensors = params;
    ck.meta["kind"] = "lm";
    ck.meta["seed"] = std::to_string(seed);
    ck.meta["config_fingerprint"] = c.fingerprint();
    ck.meta["frozen_checksum"] = hex32(params_checksum(params));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", rep.val_perplexity);
    ck.meta["val_perplexity"] = buf;
    std::snprintf(buf, sizeof(buf), "%.6f", rep.untrained_val_perplexity);
    ck.meta["untrained_val_perplexity"] = buf;
    const std::string path = c.get_str("ckpt.lm");
    ensure_parent_dir(path);
    const uint32_t crc = save_checkpoint(ck, path);
    out << "language model frozen: " << path << " (crc32 " << hex32(crc) << ")\n";
    out << "  val perplexity " << rep.val_perplexity << " (untrained " << rep.untrained_val_perplexity
        << ")\n";
    return 0;
}

int cmd_train_bridge(const ParsedArgs& p, std::ostream& out) {
    const Config& c = p.config;
    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    uint32_t binder_crc = 0, lm_crc = 0;
    const Checkpoint binder_ck = load_checkpoint(c.get_str("ckpt.binder"), &binder_crc);
    const Checkpoint lm_ck = load_checkpoint(c.get_str("ckpt.lm"), &lm_crc);
    const std::string data_path = c.get_str("data.path");
    const auto data = parse_dataset(read_file(data_path));

    BridgeTrainConfig bcfg;
    bcfg.epochs = static_cast<int>(c.get_int("bridge.epochs"));
    bcfg.lr = c.get_float("bridge.lr");
    bcfg.batch = static_cast<int>(c.get_int("bridge.batch"));
    bcfg.anchor = modality_from_name(c.get_str("data.modality"));
    bcfg.seed = seed;
    BridgeTrainReport rep;
    const BridgeState bridge = train_bridge(data, binder_ck.tensors, lm_ck.tensors, bcfg, &rep);

    const std::string log_path = c.get_str("bridge.log");
    ensure_parent_dir(log_path);
    write_file(log_path, render_train_log(rep.log));

    Checkpoint ck;
    ck.tensors = bridge.t;
    ck.meta["kind"] = "bridge";
    ck.meta["seed"] = std::to_string(seed);
    ck.meta["config_fingerprint"] = c.fingerprint();
    ck.meta["parent.binder_crc"] = hex32(binder_crc);
    ck.meta["parent.lm_crc"] = hex32(lm_crc);
    ck.meta["parent.data_crc"] = hex32(dataset_crc(data_path));
    std::string mods;
    for (const std::string& m : rep.trained_modalities) mods += (mods.empty() ? "" : ",") + m;
    ck.meta["trained_modalities"] = mods;
    ck.meta["trainable_params"] = std::to_string(rep.trainable_params);
    ck.meta["total_params"] = std::to_string(rep.total_params);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", rep.trainable_fraction);
    ck.meta["trainable_fraction"] = buf;
    std::snprintf(buf, sizeof(buf), "%.6f", rep.first_epoch_mean_nll);
    ck.meta["first_epoch_mean_nll"] = buf;
    std::snprintf(buf, sizeof(buf), "%.6f", rep.last_epoch_mean_nll);
    ck.meta["last_epoch_mean_nll"] = buf;
    const std::string path = c.get_str("ckpt.bridge");
    ensure_parent_dir(path);
    const uint32_t crc = save_checkpoint(ck, path);
    out << "bridge trained: " << path << " (crc32 " << hex32(crc) << ")\n";
    out << "  trainable fraction " << ck.meta["trainable_fraction"] << " (" << rep.trainable_params
        << " of " << rep.total_params << ")\n";
    out << "  epoch mean NLL " << rep.first_epoch_mean_nll << " -> " << rep.last_epoch_mean_nll << "\n";
    out << "  lr log: " << log_path << "\n";
    return 0;
}

struct LoadedPipeline {
    Checkpoint binder_ck, lm_ck, bridge_ck;
    uint32_t binder_crc = 0, lm_crc = 0, bridge_crc = 0;
    BridgeState bridge;
    TrainManifest manifest;
};

LoadedPipeline load_pipeline(const Config& c, bool with_manifest) {
    LoadedPipeline lp;
    lp.binder_ck = load_checkpoint(c.get_str("ckpt.binder"), &lp.binder_crc);
    lp.lm_ck = load_checkpoint(c.get_str("ckpt.lm"), &lp.lm_crc);
    lp.bridge_ck = load_checkpoint(c.get_str("ckpt.bridge"), &lp.bridge_crc);

    auto expect = [&](const std::string& key, const std::string& have, const char* what) {
        auto it = lp.bridge_ck.meta.find(key);
        if (it == lp.bridge_ck.meta.end() || it->second != have) {
            throw InvariantError(std::string("lineage mismatch: bridge checkpoint was trained against a "
                                             "different ") +
                                 what + " (" + key + "=" +
                                 (it == lp.bridge_ck.meta.end() ? "<missing>" : it->second) + ", have " +
                                 have + ")");
        }
    };
    expect("parent.binder_crc", hex32(lp.binder_crc), "binder checkpoint");
    expect("parent.lm_crc", hex32(lp.lm_crc), "language model checkpoint");

    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    auto sit = lp.binder_ck.meta.find("seed");
    if (sit != lp.binder_ck.meta.end() && sit->second != std::to_string(seed)) {
        throw InvariantError("config seed " + std::to_string(seed) +
                             " does not match the binder checkpoint's world seed " + sit->second);
    }

    Rng dummy(0);
    lp.bridge = bridge_init(dummy);
    lp.bridge.t = lp.bridge_ck.tensors;

    if (with_manifest) {
        const std::string data_path = c.get_str("data.path");
        expect("parent.data_crc", hex32(dataset_crc(data_path)), "training dataset");
        lp.manifest = manifest_from_records(parse_dataset(read_file(data_path)));
    }
    return lp;
}

int cmd_eval(const ParsedArgs& p, std::ostream& out) {
    const Config& c = p.config;
    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    const LoadedPipeline lp = load_pipeline(c, true);
    const World world(seed);

    FullReportConfig fcfg;
    fcfg.eval_scenes = static_cast<int>(c.get_int("eval.scenes"));
    fcfg.eval_pairs = static_cast<int>(c.get_int("eval.pairs"));
    fcfg.holdout = static_cast<int>(c.get_int("binder.holdout"));
    fcfg.seed = seed;

    std::map<std::string, std::string> header;
    header["config_fingerprint"] = c.fingerprint();
    header["ckpt.binder_crc"] = hex32(lp.binder_crc);
    header["ckpt.lm_crc"] = hex32(lp.lm_crc);
    header["ckpt.bridge_crc"] = hex32(lp.bridge_crc);

    const EvalReport report = full_report(world, lp.binder_ck.tensors, lp.lm_ck.tensors, lp.bridge,
                                          lp.manifest, fcfg, std::move(header));
    const std::string path = c.get_str("report.path");
    ensure_parent_dir(path);
    const std::string text = render_report(report);
    write_file(path, text);
    out << text;
    out << "report written to " << path << "\n";
    return 0;
}

int cmd_compose(const ParsedArgs& p, std::ostream& out) {
    const Config& c = p.config;
    if (p.items.empty()) throw UsageError("compose requires at least one --item mod:obj:attr");
    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    const World world(seed);
    const Checkpoint binder_ck = load_checkpoint(c.get_str("ckpt.binder"));

    std::vector<JointEmbedding> parts;
    for (size_t i = 0; i < p.items.size(); ++i) {
        const std::string& item = p.items[i];
        const size_t c1 = item.find(':');
        const size_t c2 = (c1 == std::string::npos) ? std::string::npos : item.find(':', c1 + 1);
        if (c2 == std::string::npos) throw UsageError("--item expects mod:obj:attr, got '" + item + "'");
        ConceptScene scene;
        const Modality m = modality_from_name(item.substr(0, c1));
        scene.object_id = std::atoi(item.substr(c1 + 1, c2 - c1 - 1).c_str());
        scene.attribute_id = std::atoi(item.substr(c2 + 1).c_str());
        if (scene.object_id < 0 || scene.object_id >= kNumObjects || scene.attribute_id < 0 ||
            scene.attribute_id >= kNumAttributes) {
            throw UsageError("--item ids out of range in '" + item + "'");
        }
        Rng r = Rng(seed).child("compose-item", static_cast<uint64_t>(i));
        scene.scene_seed = r.next_u64();
        parts.push_back(binder_encode(binder_ck.tensors, render_modality(world, scene, m, r)));
    }

    std::vector<double> weights;
    if (!p.weights.empty()) {
        std::stringstream ss(p.weights);
        std::string tokstr;
        while (std::getline(ss, tokstr, ',')) weights.push_back(std::atof(tokstr.c_str()));
    }
    const JointEmbedding combined = compose(parts, weights, !p.raw_sum);

    out << "composed " << parts.size() << " embedding(s):";
    char buf[32];
    for (int j = 0; j < kEmbedDim; ++j) {
        std::snprintf(buf, sizeof(buf), " %.9g", static_cast<double>(combined.vec.at(j)));
        out << buf;
    }
    out << "\n";

    // Nearest concept by text-side dot product.
    double best = -2.0;
    ConceptScene best_scene;
    for (int obj = 0; obj < kNumObjects; ++obj) {
        for (int attr = 0; attr < kNumAttributes; ++attr) {
            ConceptScene s;
            s.object_id = obj;
            s.attribute_id = attr;
            const JointEmbedding te = binder_encode_text(binder_ck.tensors, render_caption(s));
            double dot = 0.0;
            for (int j = 0; j < kEmbedDim; ++j)
                dot += static_cast<double>(combined.vec.at(j)) * static_cast<double>(te.vec.at(j));
            if (dot > best) {
                best = dot;
                best_scene = s;
            }
        }
    }
    std::snprintf(buf, sizeof(buf), "%.4f", best);
    out << "nearest concept: " << Vocab::instance().detokenize(render_caption(best_scene)) << " (dot "
        << buf << ")\n";
    return 0;
}

int cmd_chat(const ParsedArgs& p, std::istream& in, std::ostream& out) {
    const Config& c = p.config;
    const uint64_t seed = static_cast<uint64_t>(c.get_int("seed"));
    const LoadedPipeline lp = load_pipeline(c, false);
    const World world(seed);
    const Vocab& vocab = Vocab::instance();

    std::vector<JointEmbedding> parts;
    uint64_t noise_seed = seed;
    uint64_t render_counter = 0;

    out << "chat ready; /show <mod> <obj> <attr>, /add ..., /clear, /seed <n>, plain text asks\n";
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '/') {
            std::stringstream ss(line);
            std::string cmd;
            ss >> cmd;
            if (cmd == "/show" || cmd == "/add") {
                std::string mod;
                int obj = -1, attr = -1;
                if (!(ss >> mod >> obj >> attr) || obj < 0 || obj >= kNumObjects || attr < 0 ||
                    attr >= kNumAttributes) {
                    out << "usage: " << cmd << " <img|vid|aud|dep|thm|imu> <obj 0-11> <attr 0-5>\n";
                    continue;
                }
                Modality m;
                try {
                    m = modality_from_name(mod);
                } catch (const UsageError&) {
                    out << "usage: " << cmd << " <img|vid|aud|dep|thm|imu> <obj 0-11> <attr 0-5>\n";
                    continue;
                }
                Rng r = Rng(noise_seed).child("chat-render", render_counter++);
                ConceptScene scene;
                scene.object_id = obj;
                scene.attribute_id = attr;
                scene.scene_seed = r.next_u64();
                const JointEmbedding h =
                    binder_encode(lp.binder_ck.tensors, render_modality(world, scene, m, r));
                if (cmd == "/show") parts.clear();
                parts.push_back(h);
                out << "[" << (cmd == "/show" ? "showing" : "added") << " " << mod << " obj=" << obj
                    << " attr=" << attr << "; prefix holds " << parts.size() << " embedding(s)]\n";
            } else if (cmd == "/clear") {
                parts.clear();
                out << "[prefix cleared]\n";
            } else if (cmd == "/seed") {
                uint64_t n = 0;
                if (!(ss >> n)) {
                    out << "usage: /seed <n>\n";
                    continue;
                }
                noise_seed = n;
                render_counter = 0;
                out << "[render seed set to " << n << "]\n";
            } else if (cmd == "/quit" || cmd == "/exit") {
                break;
            } else {
                out << "unknown command " << cmd << "; try /show /add /clear /seed /quit\n";
            }
            continue;
        }
        const std::vector<int> instruction = vocab.tokenize(line);
        std::vector<int> answer;
        if (parts.empty()) {
            answer = bridge_answer(lp.lm_ck.tensors, lp.bridge, nullptr, instruction);
        } else {
            const JointEmbedding h = (parts.size() == 1) ? parts[0] : compose(parts, {});
            answer = bridge_answer(lp.lm_ck.tensors, lp.bridge, &h, instruction);
        }
        out << vocab.detokenize(answer) << "\n";
    }
    return 0;
}

int cmd_inspect_ckpt(const ParsedArgs& p, std::ostream& out) {
    if (p.positional.size() != 1) throw UsageError("inspect-ckpt expects exactly one checkpoint path");
    uint32_t crc = 0;
    const Checkpoint ck = load_checkpoint(p.positional[0], &crc);
    out << "checkpoint " << p.positional[0] << " (crc32 " << hex32(crc) << ")\n";
    for (const auto& [k, v] : ck.meta) out << "  meta " << k << "=" << v << "\n";
    for (const auto& [name, t] : ck.tensors) out << "  tensor " << name << " " << t.shape_str() << "\n";
    if (!p.rewrite_path.empty()) {
        ensure_parent_dir(p.rewrite_path);
        const uint32_t crc2 = save_checkpoint(ck, p.rewrite_path);
        out << "rewritten to " << p.rewrite_path << " (crc32 " << hex32(crc2) << ")\n";
    }
    return 0;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
                 std::ostream& err) {
    try {
        const ParsedArgs p = parse_args(args);
        if (p.subcommand == "gen-data") return cmd_gen_data(p, out);
        if (p.subcommand == "train-binder") return cmd_train_binder(p, out);
        if (p.subcommand == "pretrain-lm") return cmd_pretrain_lm(p, out);
        if (p.subcommand == "train-bridge") return cmd_train_bridge(p, out);
        if (p.subcommand == "eval") return cmd_eval(p, out);
        if (p.subcommand == "compose") return cmd_compose(p, out);
        if (p.subcommand == "chat") return cmd_chat(p, in, out);
        if (p.subcommand == "inspect-ckpt") return cmd_inspect_ckpt(p, out);
        throw UsageError("unknown subcommand '" + p.subcommand + "'");
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n" << kUsage;
        return 1;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "invariant violation: " << e.what() << "\n";
        return 2;
    }
}

int cli_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_dispatch(args, std::cin, std::cout, std::cerr);
}

}  // namespace pgpt
