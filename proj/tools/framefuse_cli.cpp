// framefuse: one transformer, many image tasks over procedural toy scenes.
//
// Subcommands: build-data, train, generate, eval, ablate-prompt.
// Exit codes: 0 success, 2 usage, 3 data integrity, 4 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "framefuse/datasets.hpp"
#include "framefuse/eval.hpp"
#include "framefuse/model.hpp"
#include "framefuse/prompting.hpp"
#include "framefuse/sampler.hpp"
#include "framefuse/toyworld.hpp"
#include "framefuse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ff;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IntegrityError("cannot open config file: " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config file ") + path + ": " + e.what());
    }
}

std::vector<std::string> split_csv(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c)) || sep == ' ') {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// horizontal strip of images with 1px white separators
Image make_grid(const std::vector<std::vector<Image>>& rows) {
    int cell_w = 0, cell_h = 0;
    size_t cols = 0;
    for (const auto& row : rows) {
        cols = std::max(cols, row.size());
        for (const Image& im : row) {
            cell_w = std::max(cell_w, im.width);
            cell_h = std::max(cell_h, im.height);
        }
    }
    Image grid(int(cols) * (cell_w + 1) + 1, int(rows.size()) * (cell_h + 1) + 1);
    std::fill(grid.px.begin(), grid.px.end(), 255);
    for (size_t r = 0; r < rows.size(); r++)
        for (size_t c = 0; c < rows[r].size(); c++) {
            const Image& im = rows[r][c];
            int ox = int(c) * (cell_w + 1) + 1, oy = int(r) * (cell_h + 1) + 1;
            for (int y = 0; y < im.height; y++)
                for (int x = 0; x < im.width; x++) {
                    const uint8_t* p = im.at(x, y);
                    grid.set(ox + x, oy + y, p[0], p[1], p[2]);
                }
        }
    return grid;
}

std::vector<std::pair<Image, prompting::Role>> parse_inputs(
    const std::vector<std::string>& specs) {
    std::vector<std::pair<Image, prompting::Role>> inputs;
    for (const std::string& spec : specs) {
        size_t colon = spec.rfind(':');
        std::string path = colon == std::string::npos ? spec : spec.substr(0, colon);
        std::string role = colon == std::string::npos ? "canvas" : spec.substr(colon + 1);
        inputs.emplace_back(read_png(path), prompting::role_from_name(role));
    }
    return inputs;
}

// ------------------------------------------------------------ build-data

struct BuildArgs {
    std::string family, out, config_file;
    int n = 0;
    uint64_t seed = 0;
    int resolution = -1;
    double p_jitter = -1;
    int min_edits = -1, max_edits = -1;
    std::string edit_kinds;
};

int run_build(const BuildArgs& a) {
    datasets::Family fam = datasets::family_from_name(a.family);
    datasets::BuildConfig cfg;
    if (!a.config_file.empty()) cfg = datasets::BuildConfig::from_json(load_json_file(a.config_file));
    if (a.resolution > 0) {
        cfg.gen = toyworld::GeneratorConfig::for_resolution(a.resolution);
    }
    if (a.p_jitter >= 0) cfg.p_jitter = a.p_jitter;
    if (a.min_edits > 0) cfg.min_edits = a.min_edits;
    if (a.max_edits > 0) cfg.max_edits = a.max_edits;
    if (!a.edit_kinds.empty()) {
        cfg.edit_kinds.clear();
        for (const std::string& k : split_csv(a.edit_kinds))
            cfg.edit_kinds.push_back(toyworld::edit_kind_from_name(k));
    }
    datasets::DatasetManifest m = datasets::build(fam, a.n, a.seed, cfg);
    datasets::save(m, a.out);
    std::cout << "wrote " << m.records.size() << " " << a.family << " records to " << a.out
              << "\n";
    return 0;
}

// ------------------------------------------------------------ train

struct TrainArgs {
    std::vector<std::string> data;
    std::string out, config_file, resume;
    long steps = -1;
    int batch = -1;
    double lr = -1;
    long warmup = -1;
    uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> mix;
    int d_model = -1, layers = -1, heads = -1, patch = -1;
    bool use_ae = false;
};

int run_train(const TrainArgs& a) {
    if (a.data.empty()) throw ConfigError("train needs at least one --data manifest directory");
    std::vector<datasets::DatasetManifest> manifests;
    for (const std::string& dir : a.data) manifests.push_back(datasets::load(dir));
    std::vector<const datasets::DatasetManifest*> data;
    for (const auto& m : manifests) data.push_back(&m);

    training::TrainConfig cfg;
    if (!a.config_file.empty()) cfg = training::TrainConfig::from_json(load_json_file(a.config_file));
    if (a.steps > 0) cfg.total_steps = a.steps;
    if (a.batch > 0) cfg.batch_size = a.batch;
    if (a.lr > 0) cfg.base_lr = a.lr;
    if (a.warmup >= 0) cfg.warmup_steps = a.warmup;
    if (a.seed_set) cfg.seed = a.seed;
    if (!a.mix.empty()) {
        cfg.mixing.clear();
        for (const std::string& spec : a.mix) {
            size_t eq = spec.find('=');
            if (eq == std::string::npos) throw ConfigError("--mix expects family=weight");
            cfg.mixing.emplace_back(spec.substr(0, eq), std::stod(spec.substr(eq + 1)));
        }
    }

    prompting::Vocabulary vocab = prompting::Vocabulary::standard();
    std::optional<model::Net<float>> net;
    model::OptState opt;
    const model::OptState* opt_ptr = nullptr;
    long start_step = 0;
    std::optional<model::Autoencoder> ae;

    if (!a.resume.empty()) {
        model::CheckpointData ck = model::load_checkpoint(a.resume);
        vocab = ck.vocab;
        net.emplace(*ck.net);
        if (ck.has_opt) {
            opt = ck.opt;
            opt_ptr = &opt;
        }
        start_step = ck.step;
        if (ck.ae) ae = ck.ae;
        if (!a.seed_set) cfg.seed = ck.train_seed;
    } else {
        model::ModelConfig mc;
        mc.vocab_size = vocab.size();
        mc.resolution = manifests.front().build.gen.resolution;
        if (!cfg.resolution_schedule.empty()) mc.resolution = cfg.resolution_schedule.front().second;
        if (a.d_model > 0) mc.d_model = a.d_model;
        if (a.layers > 0) mc.n_layers = a.layers;
        if (a.heads > 0) mc.n_heads = a.heads;
        if (a.patch > 0) mc.patch = a.patch;
        mc.use_ae = a.use_ae;
        if (mc.use_ae) {
            std::vector<Image> imgs;
            for (const auto& m : manifests)
                for (const auto& s : m.records)
                    for (const auto& [img, role] : s.inputs) imgs.push_back(img);
            if (imgs.empty())
                for (const auto& s : manifests.front().records) imgs.push_back(s.outputs.at(0));
            model::Autoencoder enc(mc.ae_channels);
            enc.train(imgs, 3000, 1e-3f, cfg.seed);
            ae = enc;
        }
        net.emplace(mc);
        net->init_params(derive_seed(cfg.seed, 0x1417));
    }

    model::Net<float> trained = training::train(*net, vocab, data, cfg, a.out, opt_ptr,
                                                start_step, ae ? &*ae : nullptr);
    std::cout << "trained to step " << cfg.total_steps << "; checkpoints under " << a.out
              << "\n";
    return 0;
}

// ------------------------------------------------------------ generate

struct GenArgs {
    std::string ckpt, prompt, tags, out;
    std::vector<std::string> inputs;
    int outputs = 1, steps = 50;
    double guidance = 2.0;
    uint64_t seed = 0;
};

int run_generate(const GenArgs& a) {
    model::CheckpointData ck = model::load_checkpoint(a.ckpt);
    auto inputs = parse_inputs(a.inputs);

    prompting::PromptBundle bundle;
    bundle.base_prompt = a.prompt;
    for (const std::string& t : split_csv(a.tags)) bundle.context_tags.push_back(t);
    std::string prompt = prompting::assemble(bundle);

    sampler::SampleOptions opt;
    opt.steps = a.steps;
    opt.guidance = a.guidance;
    opt.seed = a.seed;
    std::vector<Image> outs = sampler::sample(*ck.net, ck.vocab, inputs, prompt, a.outputs, opt,
                                              ck.ae ? &*ck.ae : nullptr);

    fs::create_directories(a.out);
    for (size_t m = 0; m < outs.size(); m++)
        write_png(a.out + "/out_" + std::to_string(m) + ".png", outs[m]);
    std::vector<Image> row;
    for (const auto& [img, role] : inputs) row.push_back(img);
    for (const Image& img : outs) row.push_back(img);
    write_png(a.out + "/grid.png", make_grid({row}));
    std::cout << "wrote " << outs.size() << " output(s) and grid.png to " << a.out << "\n";
    return 0;
}

// ------------------------------------------------------------ eval

struct EvalArgs {
    std::string ckpt, data, report;
    int steps = 50;
    double guidance = 2.0;
    uint64_t seed = 0;
    double tolerance = 0.05;
    bool oracle_stub = false;
    bool no_embedder = false;
};

int run_eval(const EvalArgs& a) {
    datasets::DatasetManifest m = datasets::load(a.data);
    eval::EvalOptions opt;
    opt.steps = a.steps;
    opt.guidance = a.guidance;
    opt.seed = a.seed;
    opt.tolerance = a.tolerance;

    std::optional<model::CheckpointData> ck;
    eval::ModelGenerator mg;
    eval::OracleGenerator og;
    const eval::Generator* gen = &og;
    if (!a.oracle_stub) {
        ck.emplace(model::load_checkpoint(a.ckpt));
        mg.net = &*ck->net;
        mg.vocab = &ck->vocab;
        mg.steps = a.steps;
        mg.guidance = a.guidance;
        mg.ae = ck->ae ? &*ck->ae : nullptr;
        gen = &mg;
    }

    std::optional<eval::AttributeEmbedder> emb;
    if (!a.no_embedder)
        emb = eval::AttributeEmbedder::train(m.build.gen.resolution, derive_seed(a.seed, 0xe3b));
    eval::MetricReport rep =
        eval::evaluate(*gen, m, opt, emb ? &*emb : nullptr, emb ? &*emb : nullptr);
    std::cout << rep.table();
    if (!a.report.empty()) {
        std::ofstream f(a.report);
        f << rep.to_json().dump(2) << "\n";
        std::cout << "report written to " << a.report << "\n";
    }
    return 0;
}

// ------------------------------------------------------------ ablate-prompt

struct AblateArgs {
    std::string ckpt, prompt, tag_sets, roles, out, record_dir;
    std::vector<std::string> inputs;
    int index = 0, steps = 50;
    double guidance = 2.0;
    uint64_t seed = 0;
};

int run_ablate(const AblateArgs& a) {
    model::CheckpointData ck = model::load_checkpoint(a.ckpt);

    std::vector<std::pair<Image, prompting::Role>> inputs;
    std::string base_prompt = a.prompt;
    std::optional<datasets::Sample> oracle_sample;
    if (!a.record_dir.empty()) {
        datasets::DatasetManifest m = datasets::load(a.record_dir);
        if (a.index < 0 || a.index >= int(m.records.size()))
            throw ConfigError("--index out of range for manifest");
        oracle_sample = m.records[size_t(a.index)];
        inputs = oracle_sample->inputs;
        if (base_prompt.empty()) base_prompt = oracle_sample->base_prompt;
    } else {
        inputs = parse_inputs(a.inputs);
    }
    if (inputs.empty()) throw ConfigError("ablate-prompt needs --input or --record");

    std::vector<std::vector<std::string>> tag_sets;
    for (const std::string& set : split_csv(a.tag_sets, ';')) tag_sets.push_back(split_csv(set));
    if (tag_sets.empty()) tag_sets.push_back({});
    std::vector<std::vector<prompting::Role>> role_sets;
    for (const std::string& set : split_csv(a.roles, ';')) {
        std::vector<prompting::Role> rs;
        for (const std::string& r : split_csv(set)) rs.push_back(prompting::role_from_name(r));
        if (rs.size() != inputs.size())
            throw ConfigError("each --roles set needs one role per input");
        role_sets.push_back(rs);
    }
    if (role_sets.empty()) {
        std::vector<prompting::Role> rs;
        for (const auto& [img, role] : inputs) rs.push_back(role);
        role_sets.push_back(rs);
    }

    json diag = json::array();
    std::vector<std::vector<Image>> grid_rows;
    fs::create_directories(a.out);
    for (size_t ri = 0; ri < role_sets.size(); ri++) {
        std::vector<Image> row;
        for (size_t ti = 0; ti < tag_sets.size(); ti++) {
            prompting::PromptBundle bundle{base_prompt, tag_sets[ti], {}};
            std::string prompt = prompting::assemble(bundle);
            std::vector<std::pair<Image, prompting::Role>> cell_inputs = inputs;
            for (size_t i = 0; i < cell_inputs.size(); i++)
                cell_inputs[i].second = role_sets[ri][i];
            sampler::SampleOptions opt;
            opt.steps = a.steps;
            opt.guidance = a.guidance;
            opt.seed = a.seed;
            Image img = sampler::sample(*ck.net, ck.vocab, cell_inputs, prompt, 1, opt,
                                        ck.ae ? &*ck.ae : nullptr)
                            .at(0);
            char name[64];
            std::snprintf(name, sizeof name, "cell_r%zu_t%zu.png", ri, ti);
            write_png(a.out + "/" + name, img);
            json cell{{"row", ri}, {"col", ti}, {"tags", tag_sets[ti]}, {"image", name}};
            if (oracle_sample) {
                eval::RegionScores rs = eval::score_candidate(*oracle_sample, img);
                cell["edited_score"] = rs.edited;
                cell["preserved_score"] = rs.preserved;
            }
            diag.push_back(cell);
            row.push_back(std::move(img));
        }
        grid_rows.push_back(std::move(row));
    }
    write_png(a.out + "/grid.png", make_grid(grid_rows));
    std::ofstream f(a.out + "/cells.json");
    f << diag.dump(2) << "\n";
    std::cout << diag.dump(2) << "\n";
    std::cout << "grid written to " << a.out << "/grid.png\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified toy-scene image generation and editing"};
    app.require_subcommand(1);

    BuildArgs ba;
    CLI::App* build = app.add_subcommand("build-data", "generate a dataset manifest");
    build->add_option("--family", ba.family, "frame2frame|multi_object|object_insertion|object_add|seg|control|t2i")->required();
    build->add_option("--n", ba.n, "record count")->required();
    build->add_option("--seed", ba.seed, "dataset seed");
    build->add_option("--out", ba.out, "output directory")->required();
    build->add_option("--config", ba.config_file, "build config JSON (flags override)");
    build->add_option("--resolution", ba.resolution, "16|32|64");
    build->add_option("--p-jitter", ba.p_jitter, "global jitter probability");
    build->add_option("--min-edits", ba.min_edits);
    build->add_option("--max-edits", ba.max_edits);
    build->add_option("--edit-kinds", ba.edit_kinds, "csv of edit kinds for frame2frame");

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "train on one or more manifests");
    train->add_option("--data", ta.data, "manifest directories")->required()->expected(-1);
    train->add_option("--out", ta.out, "run directory for checkpoints + metrics")->required();
    train->add_option("--config", ta.config_file, "train config JSON (flags override)");
    train->add_option("--resume", ta.resume, "checkpoint directory to resume from");
    train->add_option("--steps", ta.steps);
    train->add_option("--batch", ta.batch);
    train->add_option("--lr", ta.lr);
    train->add_option("--warmup", ta.warmup);
    auto* seed_opt = train->add_option("--seed", ta.seed);
    train->add_option("--mix", ta.mix, "family=weight (repeatable)")->expected(-1);
    train->add_option("--d-model", ta.d_model);
    train->add_option("--layers", ta.layers);
    train->add_option("--heads", ta.heads);
    train->add_option("--patch", ta.patch);
    train->add_flag("--use-ae", ta.use_ae, "train and use the tiny autoencoder");

    GenArgs ga;
    CLI::App* gen = app.add_subcommand("generate", "sample output images");
    gen->add_option("--ckpt", ga.ckpt, "checkpoint directory")->required();
    gen->add_option("--input", ga.inputs, "input image as path:role (repeatable)")->expected(-1);
    gen->add_option("--prompt", ga.prompt, "base prompt")->required();
    gen->add_option("--tags", ga.tags, "csv of context tags");
    gen->add_option("--outputs", ga.outputs, "output image count");
    gen->add_option("--steps", ga.steps);
    gen->add_option("--seed", ga.seed);
    gen->add_option("--guidance", ga.guidance);
    gen->add_option("--out", ga.out, "output directory")->required();

    EvalArgs ea;
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
    ev->add_option("--ckpt", ea.ckpt, "checkpoint directory");
    ev->add_option("--data", ea.data, "manifest directory")->required();
    ev->add_option("--steps", ea.steps);
    ev->add_option("--seed", ea.seed);
    ev->add_option("--guidance", ea.guidance);
    ev->add_option("--tolerance", ea.tolerance, "per-region agreement tolerance");
    ev->add_option("--report", ea.report, "write JSON report here");
    ev->add_flag("--oracle-stub", ea.oracle_stub, "score the exact oracle outputs instead");
    ev->add_flag("--no-embedder", ea.no_embedder, "skip embedding metrics");

    AblateArgs aa;
    CLI::App* ab = app.add_subcommand("ablate-prompt", "vary tags/roles on a fixed input");
    ab->add_option("--ckpt", aa.ckpt)->required();
    ab->add_option("--input", aa.inputs, "input image as path:role (repeatable)")->expected(-1);
    ab->add_option("--prompt", aa.prompt);
    ab->add_option("--record", aa.record_dir, "manifest directory for oracle diagnostics");
    ab->add_option("--index", aa.index, "record index within --record");
    ab->add_option("--tag-sets", aa.tag_sets, "tag sets: csv groups separated by ';'");
    ab->add_option("--roles", aa.roles, "role sets: csv groups separated by ';'");
    ab->add_option("--steps", aa.steps);
    ab->add_option("--seed", aa.seed);
    ab->add_option("--guidance", aa.guidance);
    ab->add_option("--out", aa.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (ta.seed > 0 || seed_opt->count() > 0) ta.seed_set = seed_opt->count() > 0;
        if (build->parsed()) return run_build(ba);
        if (train->parsed()) return run_train(ta);
        if (gen->parsed()) return run_generate(ga);
        if (ev->parsed()) return run_eval(ea);
        if (ab->parsed()) return run_ablate(aa);
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const ReferenceError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const VocabularyError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const IntegrityError& e) {
        std::cerr << "data integrity error: " << e.what() << "\n";
        return 3;
    } catch (const ParseError& e) {
        std::cerr << "data integrity error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
