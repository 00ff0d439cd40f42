#include "toponets/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "toponets/spn_io.hpp"

namespace toponets {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

template <class... Args>
void progress(const char* fmt, Args... args) {
    if (verbosity() < 1) return;
    std::fprintf(stderr, fmt, args...);
    std::fflush(stderr);
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

std::uint64_t text_hash(const std::string& s) { return fnv1a(s); }

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

nlohmann::json parse_json_file(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::uint32_t class_arg(const std::string& s, const ClassCatalogue& cat) {
    if (!s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        const auto v = std::stoul(s);
        if (v >= cat.num_classes()) throw InputError("class index " + s + " out of range");
        return static_cast<std::uint32_t>(v);
    }
    return cat.index(s);
}

}  // namespace

void prepare_output_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw InputError("output path '" + dir.string() + "' is not a directory");
        if (!fs::is_empty(dir) && !force)
            throw InputError("output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
    }
    fs::create_directories(dir);
}

GenOutput cmd_gen(const GenOptions& opt) {
    const auto cat = load_catalogue(opt.config.class_setup);
    opt.config.check(cat);
    prepare_output_dir(opt.out, opt.force);
    progress("gen: %d floors x %d sequences into %s\n", opt.config.floors, opt.config.sequences, opt.out.c_str());
    GenOutput out;
    out.manifest = generate_corpus(opt.config, cat, opt.out);
    out.manifest_hash = text_hash(read_text(opt.out / "manifest.json"));
    return out;
}

TrainOutput cmd_train(const TrainOptions& opt) {
    const auto& cfg = opt.config;
    cfg.check();
    const auto manifest = load_manifest(opt.corpus);
    if (manifest.config.class_setup != cfg.class_setup)
        throw InputError("corpus uses the " + std::to_string(manifest.config.class_setup) + "-class setup, config asks for " +
                         std::to_string(cfg.class_setup));
    const auto split = parse_split(cfg.split);
    std::vector<SemanticMap> train_maps;
    for (int f : split.train) {
        auto maps = load_floor(opt.corpus, manifest, f);
        train_maps.insert(train_maps.end(), maps.begin(), maps.end());
    }
    load_floor(opt.corpus, manifest, split.test);  // the test floor must exist too

    prepare_output_dir(opt.out, opt.force);
    if (fs::exists(opt.out / "models")) fs::remove_all(opt.out / "models");
    progress("train: split %s, %zu training maps\n", cfg.split.c_str(), train_maps.size());
    const auto t0 = Clock::now();
    TrainOutput out;
    const auto models = train_models(train_maps, cfg, &out.log);
    progress("train: done in %.1f s\n", seconds_since(t0));

    save_models(opt.out / "models", models);
    write_text(opt.out / "config.json", to_json(cfg).dump(2) + "\n");
    write_text(opt.out / "loss_place_model.csv", trace_csv(out.log.place_model));
    for (const auto& r : out.log.templates) write_text(opt.out / ("loss_template_" + r.name + ".csv"), trace_csv(r.trace));
    out.model_hash = directory_hash(opt.out / "models");
    write_text(opt.out / "model_hash.txt", hex64(out.model_hash) + "\n");
    return out;
}

EvalOutput cmd_eval(const EvalOptions& opt) {
    auto cfg = experiment_config_from_json(parse_json_file(opt.models / "config.json"));
    if (opt.swaps) cfg.novelty_swaps = *opt.swaps;
    if (opt.decompositions) cfg.decompositions = *opt.decompositions;
    cfg.check();
    if (opt.tasks.empty()) throw InputError("eval: no task selected");
    for (auto t : opt.tasks)
        if (t == Task::Placeholders && opt.engine == Engine::Local)
            throw InputError("eval: the local engine has no placeholder inference");

    const auto models = load_models(opt.models / "models");
    const auto manifest = load_manifest(opt.corpus);
    if (manifest.config.class_setup != models.toponet.num_classes)
        throw InputError("eval: corpus and models use different class setups");
    const auto split = parse_split(cfg.split);
    const auto tests = load_floor(opt.corpus, manifest, split.test);
    prepare_output_dir(opt.out, opt.force);

    nlohmann::json report{{"engine", to_string(opt.engine)},
                          {"split", cfg.split},
                          {"test_floor", split.test},
                          {"maps", tests.size()},
                          {"model_hash", hex64(directory_hash(opt.models / "models"))},
                          {"corpus_hash", hex64(text_hash(read_text(opt.corpus / "manifest.json")))},
                          {"config", to_json(cfg)},
                          {"tasks", nlohmann::json::object()}};
    nlohmann::json timings = nlohmann::json::object();
    std::string summary = "task,engine,metric,value\n";
    std::string per_map = "task,map,correct,total,accuracy\n";
    const auto engine = to_string(opt.engine);

    for (auto task : opt.tasks) {
        const auto name = to_string(task);
        progress("eval: %s with %s on %zu maps\n", name.c_str(), engine.c_str(), tests.size());
        const auto t0 = Clock::now();
        if (task == Task::Novelty) {
            std::vector<MapNovelty> res(tests.size());
            parallel_for(tests.size(), opt.jobs, [&](std::size_t i) { res[i] = eval_novelty(models, tests[i], opt.engine, cfg); });
            const auto s = summarize_novelty(res);
            nlohmann::json maps = nlohmann::json::array();
            for (const auto& r : res) maps.push_back(to_json(r));
            report["tasks"][name] = {{"summary", to_json(s)}, {"maps", maps}};
            for (auto [k, v] : {std::pair{"auc", s.auc}, {"paired_rate", s.paired_rate}, {"mean_map_auc", s.mean_map_auc},
                                {"pairs", static_cast<double>(s.pairs)}})
                summary += name + "," + engine + "," + k + "," + num(v) + "\n";
            std::string roc = "threshold,tpr,fpr\n";
            for (const auto& p : s.roc)
                roc += num(p.threshold) + "," + num(p.true_positive_rate) + "," + num(p.false_positive_rate) + "\n";
            write_text(opt.out / "roc.csv", roc);
            std::string scores = "map,kind,class_a,class_b,score\n";
            for (const auto& r : res) {
                scores += csv_field(r.map) + ",known,,," + num(r.known) + "\n";
                for (const auto& n : r.novel)
                    scores += csv_field(r.map) + ",novel," + std::to_string(n.class_a) + "," + std::to_string(n.class_b) + "," +
                              num(n.score) + "\n";
            }
            write_text(opt.out / "novelty_scores.csv", scores);
        } else {
            std::vector<MapAccuracy> res(tests.size());
            parallel_for(tests.size(), opt.jobs, [&](std::size_t i) {
                res[i] = task == Task::Classify ? eval_classify(models, tests[i], opt.engine, cfg)
                                                : eval_placeholders(models, tests[i], opt.engine, cfg);
            });
            const auto s = summarize_accuracy(res);
            nlohmann::json maps = nlohmann::json::array();
            for (const auto& r : res) {
                maps.push_back(to_json(r));
                per_map += name + "," + csv_field(r.map) + "," + std::to_string(r.correct) + "," + std::to_string(r.total) + "," +
                           num(r.accuracy()) + "\n";
            }
            report["tasks"][name] = {{"summary", to_json(s)}, {"maps", maps}};
            for (auto [k, v] : {std::pair{"accuracy_mean", s.per_map.mean}, {"accuracy_std", s.per_map.std},
                                {"accuracy_pooled", s.pooled}, {"majority_baseline", s.majority},
                                {"nodes", static_cast<double>(s.total)}})
                summary += name + "," + engine + "," + k + "," + num(v) + "\n";
        }
        timings[name] = seconds_since(t0);
        progress("eval: %s done in %.1f s\n", name.c_str(), timings[name].get<double>());
    }

    EvalOutput out;
    out.report = report;
    const auto text = report.dump(2) + "\n";
    out.report_hash = text_hash(text);
    write_text(opt.out / "report.json", text);
    write_text(opt.out / "report.csv", summary);
    write_text(opt.out / "per_map.csv", per_map);
    write_text(opt.out / "timings.json", timings.dump(2) + "\n");
    return out;
}

std::vector<BenchSize> cmd_bench(const BenchOptions& opt, nlohmann::json* report) {
    if (opt.repetitions < 1) throw InputError("bench: repetitions must be >= 1");
    if (opt.decompositions < 1) throw InputError("bench: decompositions must be >= 1");
    const auto model = load_toponet(opt.models / "models" / "toponet");
    const auto cat = load_catalogue(model.num_classes);
    GeneratorConfig gen;
    gen.class_setup = model.num_classes;

    std::vector<BenchSize> out;
    nlohmann::json sizes = nlohmann::json::array();
    for (auto size : opt.sizes) {
        const auto map = bench_map(gen, cat, size, opt.seed);
        BenchSize b;
        b.size = size;
        double log_p = 0.0;
        for (std::uint32_t r = 0; r < opt.repetitions; ++r) {
            const auto t0 = Clock::now();
            const auto inst = instantiate(model, map, opt.decompositions, opt.seed);
            log_p = evaluate(inst.spn, map_evidence(inst, map));
            b.seconds.push_back(seconds_since(t0));
        }
        auto sorted = b.seconds;
        std::sort(sorted.begin(), sorted.end());
        const auto n = sorted.size();
        b.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        progress("bench: %zu nodes, median %.3f s over %u runs\n", size, b.median, opt.repetitions);
        sizes.push_back({{"nodes", size},
                         {"edges", map.edges.size()},
                         {"median_seconds", b.median},
                         {"seconds", b.seconds},
                         {"log_probability", log_p},
                         {"within_budget", b.median <= opt.budget_seconds}});
        out.push_back(std::move(b));
    }
    nlohmann::json j{{"decompositions", opt.decompositions},
                     {"repetitions", opt.repetitions},
                     {"seed", opt.seed},
                     {"threads", 1},
                     {"budget_seconds", opt.budget_seconds},
                     {"reference_gpu_seconds", {{"105", 0.36}, {"155", 0.49}}},
                     {"sizes", sizes}};
    if (!opt.out.empty()) write_text(opt.out, j.dump(2) + "\n");
    if (report) *report = std::move(j);
    return out;
}

void cmd_swap(const SwapOptions& opt) {
    if (fs::exists(opt.out) && !opt.force)
        throw InputError("output file '" + opt.out.string() + "' exists (use --force to overwrite)");
    const auto map = load_map(opt.in);
    const auto cat = load_catalogue(map.num_classes);
    auto swapped = swap_classes(map, class_arg(opt.class_a, cat), class_arg(opt.class_b, cat));
    save_map(opt.out, swapped);
}

namespace {

std::vector<Task> parse_tasks(const std::string& s) {
    if (s == "all") return {Task::Classify, Task::Placeholders, Task::Novelty};
    return {task_from_string(s)};
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"TopoNets: sum-product networks over topological semantic maps"};
    app.require_subcommand(1);
    app.footer("Set TOPONETS_VERBOSE=0 to silence progress output, 2 for more detail.");

    GenOptions gen;
    std::string gen_config;
    auto* g = app.add_subcommand("gen", "Generate a synthetic corpus");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--config", gen_config, "Generator config JSON; flags override it");
    auto* g_classes = g->add_option("--classes", gen.config.class_setup, "Class setup (6 or 10)")->capture_default_str();
    auto* g_seed = g->add_option("--seed", gen.config.rng_seed, "Generator seed")->capture_default_str();
    auto* g_floors = g->add_option("--floors", gen.config.floors, "Number of floors")->capture_default_str();
    auto* g_first = g->add_option("--first-floor", gen.config.first_floor, "Number of the first floor")->capture_default_str();
    auto* g_seq = g->add_option("--sequences", gen.config.sequences, "Explorations per floor")->capture_default_str();
    g->add_flag("--force", gen.force, "Write into a non-empty output directory");

    TrainOptions train;
    std::string train_config;
    auto* t = app.add_subcommand("train", "Train the place model, template SPNs and pairwise potentials");
    t->add_option("--corpus", train.corpus, "Corpus directory from gen")->required();
    t->add_option("--out", train.out, "Output directory")->required();
    t->add_option("--config", train_config, "Experiment config JSON; flags override it");
    auto* t_split = t->add_option("--split", train.config.split, "Leave-one-floor-out split")->capture_default_str();
    auto* t_classes = t->add_option("--classes", train.config.class_setup, "Class setup (6 or 10)")->capture_default_str();
    auto* t_n = t->add_option("--decompositions", train.config.decompositions, "Decompositions per map at inference")
                    ->capture_default_str();
    auto* t_seed = t->add_option("--seed", train.config.seed, "Experiment seed")->capture_default_str();
    t->add_flag("--force", train.force, "Write into a non-empty output directory");

    EvalOptions eval;
    std::string task = "all", engine = "toponet";
    std::uint32_t swaps = 0, eval_n = 0;
    auto* e = app.add_subcommand("eval", "Run an inference task on the test floor of the trained split");
    e->add_option("--corpus", eval.corpus, "Corpus directory from gen")->required();
    e->add_option("--models", eval.models, "Output directory of train")->required();
    e->add_option("--out", eval.out, "Report directory")->required();
    e->add_option("--task", task, "classify, placeholders, novelty or all")
        ->check(CLI::IsMember({"classify", "placeholders", "novelty", "all"}))
        ->capture_default_str();
    e->add_option("--engine", engine, "toponet, mrf or local")
        ->check(CLI::IsMember({"toponet", "mrf", "local"}))
        ->capture_default_str();
    auto* e_swaps = e->add_option("--swaps", swaps, "Swapped maps per test map (default 10 for 6 classes, 30 for 10)");
    auto* e_n = e->add_option("--decompositions", eval_n, "Override the trained decomposition count");
    e->add_option("--jobs", eval.jobs, "Worker threads across maps")->capture_default_str()->check(CLI::PositiveNumber);
    e->add_flag("--force", eval.force, "Write into a non-empty output directory");

    BenchOptions bench;
    std::string bench_out;
    auto* b = app.add_subcommand("bench", "Time instantiate + evaluate on generated maps");
    b->add_option("--models", bench.models, "Output directory of train")->required();
    b->add_option("--sizes", bench.sizes, "Map sizes in nodes")->capture_default_str();
    b->add_option("--decompositions", bench.decompositions, "Decompositions per map")->capture_default_str();
    b->add_option("--repetitions", bench.repetitions, "Runs per size")->capture_default_str();
    b->add_option("--seed", bench.seed, "Map and decomposition seed")->capture_default_str();
    b->add_option("--out", bench_out, "Write the timing report as JSON");

    SwapOptions swap;
    auto* s = app.add_subcommand("swap", "Swap the local evidence of two classes in a map");
    s->add_option("--map", swap.in, "Input map JSON")->required();
    s->add_option("--out", swap.out, "Output map JSON")->required();
    s->add_option("--a", swap.class_a, "First class (name or index)")->required();
    s->add_option("--b", swap.class_b, "Second class (name or index)")->required();
    s->add_flag("--force", swap.force, "Overwrite the output file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (g->parsed()) {
            if (!gen_config.empty()) {
                auto c = generator_config_from_json(parse_json_file(gen_config));
                if (g_classes->count()) c.class_setup = gen.config.class_setup;
                if (g_seed->count()) c.rng_seed = gen.config.rng_seed;
                if (g_floors->count()) c.floors = gen.config.floors;
                if (g_first->count()) c.first_floor = gen.config.first_floor;
                if (g_seq->count()) c.sequences = gen.config.sequences;
                gen.config = c;
            }
            const auto out = cmd_gen(gen);
            std::cout << "maps " << out.manifest.maps.size() << "\n";
            std::cout << "manifest_hash " << hex64(out.manifest_hash) << "\n";
        } else if (t->parsed()) {
            if (!train_config.empty()) {
                auto c = experiment_config_from_json(parse_json_file(train_config));
                if (t_split->count()) c.split = train.config.split;
                if (t_classes->count()) c.class_setup = train.config.class_setup;
                if (t_n->count()) c.decompositions = train.config.decompositions;
                if (t_seed->count()) c.seed = train.config.seed;
                train.config = c;
            }
            const auto out = cmd_train(train);
            for (const auto& r : out.log.templates) std::cout << "template " << r.name << " parts " << r.samples << "\n";
            std::cout << "model_hash " << hex64(out.model_hash) << "\n";
        } else if (e->parsed()) {
            eval.tasks = parse_tasks(task);
            eval.engine = engine_from_string(engine);
            if (task == "all" && eval.engine == Engine::Local) eval.tasks = {Task::Classify, Task::Novelty};
            if (e_swaps->count()) eval.swaps = swaps;
            if (e_n->count()) eval.decompositions = eval_n;
            const auto out = cmd_eval(eval);
            for (const auto& [name, r] : out.report["tasks"].items()) {
                const auto& sm = r["summary"];
                if (name == "novelty")
                    std::printf("%-12s auc %.4f  paired %.4f  pairs %zu\n", name.c_str(), sm["auc"].get<double>(),
                                sm["paired_rate"].get<double>(), sm["pairs"].get<std::size_t>());
                else
                    std::printf("%-12s %.2f%% (+-%.2f) pooled %.2f%% majority %.2f%%\n", name.c_str(),
                                100 * sm["mean"].get<double>(), 100 * sm["std"].get<double>(),
                                100 * sm["pooled"].get<double>(), 100 * sm["majority_baseline"].get<double>());
            }
            std::cout << "report_hash " << hex64(out.report_hash) << "\n";
        } else if (b->parsed()) {
            bench.out = bench_out;
            for (const auto& r : cmd_bench(bench))
                std::printf("%zu nodes: median %.3f s (budget %.1f s)\n", r.size, r.median, bench.budget_seconds);
        } else if (s->parsed()) {
            cmd_swap(swap);
        }
    } catch (const InputError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace toponets
