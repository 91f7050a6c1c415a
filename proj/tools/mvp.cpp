// mvp: command-line entry point for data preparation, annotation hosting,
// reward training, diffusion tuning and evaluation reports.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cli_support.hpp"
#include "mvp/annotation.hpp"
#include "mvp/annotation_http.hpp"
#include "mvp/eval.hpp"
#include "mvp/mvp_tuning.hpp"
#include "mvp/synthetic.hpp"

namespace mvp::cli {
namespace {

void log(const std::string& sub, const std::string& msg) { std::fprintf(stderr, "[%s] %s\n", sub.c_str(), msg.c_str()); }

PreferenceData load_corpus(const fs::path& dir) {
  PreferenceData d;
  for (auto& p : load_prompt_catalog(dir / "prompts")) d.prompts.emplace(p.id, std::move(p.image));
  d.assets = load_asset_store(dir / "assets");
  if (d.assets.empty()) throw LoadError("no assets under " + (dir / "assets").string());
  return d;
}

struct Layout {
  std::size_t n_views = 0, image_size = 0;
  std::vector<Domain> domains;
};

Layout infer_layout(const PreferenceData& d) {
  const auto& a = d.assets.begin()->second;
  Layout l;
  for (const auto& v : a.views) {
    if (std::find(l.domains.begin(), l.domains.end(), v.domain) == l.domains.end()) l.domains.push_back(v.domain);
    l.n_views = std::max(l.n_views, v.view_index + 1);
  }
  l.image_size = a.views.front().image.width;
  return l;
}

// held-out prompts for the diffusion experiments: a stable hash bucket
bool heldout_prompt(const std::string& prompt_id, std::size_t every) { return fnv1a(prompt_id) % every == 0; }

void diffusion_items(const PreferenceData& d, const DiffusionConfig& dc, std::size_t every,
                     std::vector<DiffusionItem>& train, std::vector<DiffusionItem>& held) {
  for (const auto& [_, a] : d.assets)
    (heldout_prompt(a.prompt_id, every) ? held : train).push_back(make_diffusion_item(dc, d.prompt(a.prompt_id), a));
  if (train.empty() || held.empty()) throw ValidationError("held-out bucketing left an empty train or held-out set");
}

// ---------------------------------------------------------------------------

struct PrepareOpts {
  std::string out;
  std::size_t prompts = 200, image_size = 8, views = 2, annotators = 3;
  double noise = 0.05, tie = 0.03, min_gap = 0.5;
  std::uint64_t seed = 1;
};

void prepare_data(const PrepareOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  const fs::path out = P(o.out);
  SyntheticCorpusConfig cc;
  cc.n_prompts = o.prompts;
  cc.image_size = o.image_size;
  cc.synth.n_views = o.views;
  cc.annotators_per_list = o.annotators;
  cc.annotator_noise = o.noise;
  cc.tie_threshold = o.tie;
  cc.min_gap = o.min_gap;
  cc.seed = o.seed;
  const auto corpus = build_synthetic_corpus(cc);
  write_prompt_catalog(out / "prompts", corpus.prompts);
  std::map<std::string, std::vector<std::string>> lists;
  std::vector<json> quality;
  for (const auto& [id, a] : corpus.data.assets) {
    save_asset(out / "assets", a);
    lists[a.prompt_id].push_back(id);
    quality.push_back({{"asset_id", id}, {"quality", corpus.quality.at(id)}});
  }
  std::vector<json> list_rows;
  for (const auto& [pid, ids] : lists) list_rows.push_back(AssetList{pid, pid, ids});
  write_ndjson(out / "asset_lists.ndjson", list_rows);
  write_ndjson(out / "quality.ndjson", quality);
  write_records(out / "rankings.ndjson", corpus.rankings);
  write_records(out / "pairs.ndjson", corpus.pairs);
  write_manifest(out, "prepare-data", cfg, o.seed, cfile);
  log("prepare-data", std::to_string(corpus.prompts.size()) + " prompts, " + std::to_string(corpus.data.assets.size()) +
                          " assets, " + std::to_string(corpus.pairs.size()) + " pairs -> " + out.string());
}

// ---------------------------------------------------------------------------

struct ServeOpts {
  std::string data, annotators, journal, host = "127.0.0.1";
  int port = 8080;
  std::size_t cap = 400;
  std::uint64_t seed = 0;
};

AnnotationServer* g_server = nullptr;

void serve_annotations(const ServeOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  const fs::path data = P(o.data);
  std::vector<AssetList> lists;
  for (const auto& j : read_ndjson(data / "asset_lists.ndjson")) lists.push_back(j.get<AssetList>());
  std::vector<Annotator> people;
  for (const auto& entry : split_list(o.annotators)) {
    const auto colon = entry.find(':');
    people.push_back({entry.substr(0, colon), colon == std::string::npos ? Role::annotator : parse_role(entry.substr(colon + 1)), 0});
  }
  const fs::path journal = o.journal.empty() ? data / "annotation_journal.ndjson" : P(o.journal);
  AnnotationStore store(std::move(lists), people, {o.cap, o.seed, journal});
  const auto assets = load_asset_store(data / "assets");
  AnnotationServer server(store, &assets);
  write_manifest(parent_dir(journal), "serve-annotations", cfg, o.seed, cfile);
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  int port = o.port;
  if (port == 0) {
    port = server.bind_to_any_port(o.host);
    if (port < 0) throw LoadError("cannot bind " + o.host);
  }
  log("serve-annotations", "listening on http://" + o.host + ":" + std::to_string(port) + " (" +
                               std::to_string(store.lists().size()) + " asset lists, journal " + journal.string() + ")");
  const bool ok = o.port == 0 ? server.listen_after_bind() : server.listen(o.host, port);
  if (!ok && g_server) throw LoadError("cannot listen on " + o.host + ":" + std::to_string(port));
  g_server = nullptr;
}

// ---------------------------------------------------------------------------

struct AggregateOpts {
  std::string in, out, lists, aggregated;
};

void aggregate(const AggregateOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  const auto records = read_records<RankingRecord>(P(o.in));
  std::map<std::string, std::string> prompt_of;
  if (!o.lists.empty())
    for (const auto& j : read_ndjson(P(o.lists))) {
      const auto l = j.get<AssetList>();
      prompt_of[l.id] = l.prompt_id.empty() ? l.id : l.prompt_id;
    }
  std::map<std::string, std::vector<RankingRecord>> by_list;
  for (const auto& r : records) by_list[r.asset_list_id].push_back(r);
  std::vector<ComparisonPair> pairs;
  std::vector<json> aggs;
  for (const auto& [list, recs] : by_list) {
    const auto agg = borda_aggregate(recs);
    const auto it = prompt_of.find(list);
    if (!o.lists.empty() && it == prompt_of.end()) throw ValidationError("asset list " + list + " missing from " + o.lists);
    auto ps = extract_comparison_pairs(agg, it == prompt_of.end() ? list : it->second);
    pairs.insert(pairs.end(), ps.begin(), ps.end());
    aggs.push_back(agg);
  }
  const fs::path out = P(o.out);
  fs::create_directories(parent_dir(out));
  write_records(out, pairs);
  if (!o.aggregated.empty()) write_ndjson(P(o.aggregated), aggs);
  write_manifest(parent_dir(out), "aggregate", cfg, 0, cfile);
  log("aggregate", std::to_string(records.size()) + " records over " + std::to_string(by_list.size()) + " lists -> " +
                       std::to_string(pairs.size()) + " pairs");
}

// ---------------------------------------------------------------------------

struct RewardOpts {
  std::size_t token_dim = 16, heads = 2, depth = 1, patch = 4;
  double freeze = 0.5;
  bool no_mv_attention = false, no_positional = false;
  std::size_t epochs = 10, batch = 16;
  double lr = 3e-3, negative_weight = 1.0;
  std::string schedule = "cosine";
  bool no_negatives = false;
};

void add_reward_options(CLI::App* s, Registry& reg, RewardOpts& r) {
  reg.option(s, "token-dim", r.token_dim, "token width");
  reg.option(s, "heads", r.heads, "attention heads");
  reg.option(s, "depth", r.depth, "encoder blocks");
  reg.option(s, "patch", r.patch, "patch size in pixels");
  reg.option(s, "freeze", r.freeze, "fraction of leading encoder units kept frozen");
  reg.flag(s, "no-mv-attention", r.no_mv_attention, "drop the multi-view self-attention layer");
  reg.flag(s, "no-positional", r.no_positional, "drop the learned view positional encoding");
  reg.option(s, "epochs", r.epochs, "training epochs");
  reg.option(s, "batch", r.batch, "pairs per batch");
  reg.option(s, "lr", r.lr, "base learning rate");
  reg.option(s, "schedule", r.schedule, "cosine or constant")->check(CLI::IsMember({"cosine", "constant"}));
  reg.flag(s, "no-negatives", r.no_negatives, "disable modality-reversed negatives");
  reg.option(s, "negative-weight", r.negative_weight, "weight of the negative-sample term");
}

RewardModelConfig reward_config(const RewardOpts& r, const Layout& l) {
  RewardModelConfig c;
  c.n_views = l.n_views;
  c.domains = l.domains;
  c.image_size = l.image_size;
  c.patch_size = r.patch;
  c.token_dim = r.token_dim;
  c.n_heads = r.heads;
  c.encoder_depth = r.depth;
  c.freeze_fraction = r.freeze;
  c.use_mv_self_attention = !r.no_mv_attention;
  c.use_positional_encoding = !r.no_positional;
  c.validate();
  return c;
}

TrainConfig train_config(const RewardOpts& r, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = r.epochs;
  t.batch_size = r.batch;
  t.learning_rate = r.lr;
  t.schedule = r.schedule == "constant" ? Schedule::constant : Schedule::cosine;
  t.negatives_enabled = !r.no_negatives;
  t.negative_weight = r.negative_weight;
  t.seed = seed;
  return t;
}

struct TrainOpts {
  std::string data, pairs, out, backbone;
  std::uint64_t seed = 0, split_seed = 0;
  RewardOpts r;
};

void train_reward_cmd(const TrainOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  const fs::path data_dir = P(o.data), out = P(o.out);
  fs::create_directories(out);
  const auto data = load_corpus(data_dir);
  const auto pairs = read_records<ComparisonPair>(o.pairs.empty() ? data_dir / "pairs.ndjson" : P(o.pairs));
  const auto split = split_dataset(pairs, o.split_seed);
  for (const auto& w : split.warnings) log("train-reward", "warning: " + w);
  RewardModel m = init_reward_model(reward_config(o.r, infer_layout(data)), o.seed);
  if (!o.backbone.empty()) load_backbone(m, load_checkpoint(P(o.backbone)).params);
  auto res = train_reward(std::move(m), split, data, train_config(o.r, o.seed));
  save_reward_model(out / "reward.ckpt", res.model);
  json report = res.report;
  log("train-reward", "wall time " + format_number(res.report.wall_seconds, 1) + "s");
  report.erase("wall_seconds");  // keep metric files reproducible byte for byte
  report["modality_accuracy"] = split.test.empty() ? 0.0 : modality_order_accuracy(model_scorer(res.model), assets_in(split.test), data);
  report["n_train"] = split.train.size();
  report["n_val"] = split.val.size();
  report["n_test"] = split.test.size();
  write_json(out / "train_report.json", report);
  write_json(out / "split.json", {{"train_lists", split.train_lists},
                                  {"val_lists", split.val_lists},
                                  {"test_lists", split.test_lists},
                                  {"warnings", split.warnings}});
  write_records(out / "test_pairs.ndjson", split.test);
  write_manifest(out, "train-reward", cfg, o.seed, cfile);
  log("train-reward", "test pair accuracy " + format_number(res.report.test_accuracy) + " -> " + out.string());
}

struct EvalRewardOpts {
  std::string data, pairs, model, out, backbone, seeds = "0,1,2,3,4";
  bool ablations = false;
  RewardOpts r;
};

void eval_reward_cmd(const EvalRewardOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  if (o.model.empty() && !o.ablations) throw ValidationError("eval-reward needs --model, --ablations, or both");
  const fs::path data_dir = P(o.data), out = P(o.out);
  fs::create_directories(out);
  const auto data = load_corpus(data_dir);
  const auto pairs = read_records<ComparisonPair>(o.pairs.empty() ? data_dir / "pairs.ndjson" : P(o.pairs));
  const auto seeds = parse_seeds(o.seeds);
  if (!o.model.empty()) {
    const auto m = load_reward_model(P(o.model));
    const auto assets = assets_in(pairs);
    write_json(out / "metrics.json", {{"pair_accuracy", eval_pair_accuracy(m, pairs, data)},
                                      {"modality_accuracy", modality_order_accuracy(model_scorer(m), assets, data)},
                                      {"n_pairs", pairs.size()},
                                      {"n_assets", assets.size()}});
    std::vector<ScoreRecord> scores;
    for (const auto& [id, a] : data.assets)
      scores.push_back({"mvreward", a.method_id, a.prompt_id, score(m, data.prompt(a.prompt_id), a), Direction::higher_better});
    write_records(out / "scores.ndjson", scores);
  }
  if (o.ablations) {
    AblationBase base{reward_config(o.r, infer_layout(data)), train_config(o.r, 0), std::nullopt, seeds};
    if (!o.backbone.empty()) base.backbone = load_checkpoint(P(o.backbone)).params;
    const auto rows = run_ablations(
        base, {Ablation::no_backbone_init, Ablation::no_mv_self_attention, Ablation::no_negatives}, data,
        [&](std::uint64_t s) { return split_dataset(pairs, s); });
    write_json(out / "ablations.json", rows);
    std::string text = "variant                  pair_acc  modality_acc  note\n";
    for (const auto& r : rows) {
      std::string name = r.variant;
      name.resize(std::max<std::size_t>(name.size(), 25), ' ');
      text += name + format_number(r.median_pair_accuracy) + "     " + format_number(r.median_modality_accuracy) +
              "         " + r.note + "\n";
    }
    write_text(out / "ablations.txt", text);
  }
  write_manifest(out, "eval-reward", cfg, seeds.front(), cfile);
  log("eval-reward", "wrote " + out.string());
}

// ---------------------------------------------------------------------------

struct PretrainOpts {
  std::string data, out, schedule = "linear";
  std::size_t steps = 400, batch = 4, T = 1000, token_dim = 16, heads = 2, patch = 2, decoder_hidden = 32;
  std::size_t heldout_every = 5, samples = 2;
  double lr = 2e-3;
  bool latent = false;
  std::uint64_t seed = 0;
};

void pretrain_dm_cmd(const PretrainOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  const fs::path out = P(o.out);
  const auto data = load_corpus(P(o.data));
  const auto layout = infer_layout(data);
  DiffusionConfig dc;
  dc.n_views = layout.n_views;
  dc.domains = layout.domains;
  dc.image_size = layout.image_size;
  dc.patch_size = o.patch;
  dc.token_dim = o.token_dim;
  dc.n_heads = o.heads;
  dc.pixel_space = !o.latent;
  dc.decoder_hidden = o.decoder_hidden;
  dc.scheduler = {o.T, o.schedule == "cosine" ? BetaSchedule::cosine : BetaSchedule::linear};
  dc.validate();
  std::vector<DiffusionItem> train, held;
  diffusion_items(data, dc, o.heldout_every, train, held);
  auto dm = init_diffusion_model(dc, o.seed);
  const double before = heldout_pretrain_loss(dm, held, o.seed + 1);
  const auto history = pretrain_dm(dm, train, {o.steps, o.batch, o.lr, o.seed});
  const double after = heldout_pretrain_loss(dm, held, o.seed + 1);
  save_diffusion_model(out / "dm.ckpt", dm);
  std::vector<json> rows;
  for (std::size_t i = 0; i < history.size(); ++i) rows.push_back({{"step", i}, {"loss", history[i]}});
  write_ndjson(out / "pretrain_history.ndjson", rows);
  std::set<std::string> held_prompts;
  for (const auto& it : held) held_prompts.insert(it.prompt_id);
  write_json(out / "pretrain_report.json", {{"heldout_loss_before", before},
                                            {"heldout_loss_after", after},
                                            {"n_train_items", train.size()},
                                            {"n_heldout_items", held.size()},
                                            {"heldout_prompts", held_prompts}});
  std::size_t k = 0;
  for (const auto& pid : held_prompts) {
    if (k >= o.samples) break;
    const auto views = decode(dm, sample_latent(dm, data.prompt(pid), o.seed + 1000 + k++));
    fs::create_directories(out / "samples");
    write_png(out / "samples" / (sanitize_id(pid) + ".png"), view_grid(views, dc.n_views, dc.domains.size()));
  }
  write_manifest(out, "pretrain-dm", cfg, o.seed, cfile);
  log("pretrain-dm", "held-out loss " + format_number(before, 4) + " -> " + format_number(after, 4));
}

// ---------------------------------------------------------------------------

struct TuneOpts {
  std::string data, dm, reward, out, mode = "mvp", psi = "softplus_negated", midstep = "0.75,0.99", scope;
  double lambda = 10.0, lr = 1e-3;
  std::size_t steps = 100, warmup = 10, batch = 4, checkpoint_every = 0, heldout_every = 5;
  std::uint64_t seed = 0;
};

void tune_mvp_cmd(const TuneOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  const fs::path out = P(o.out);
  auto dm = load_diffusion_model(P(o.dm));
  const auto rm = load_reward_model(P(o.reward));
  const auto data = load_corpus(P(o.data));
  TuningConfig tc;
  tc.mode = parse_mode(o.mode);
  tc.psi = parse_psi(o.psi);
  tc.lambda = o.lambda;
  std::tie(tc.midstep_low, tc.midstep_high) = parse_range(o.midstep);
  tc.learning_rate = o.lr;
  tc.warmup_steps = o.warmup;
  tc.steps = o.steps;
  tc.batch_size = o.batch;
  tc.trainable_scope = split_list(o.scope);
  tc.checkpoint_every = o.checkpoint_every;
  tc.seed = o.seed;
  tc.validate();
  std::vector<DiffusionItem> train, held;
  diffusion_items(data, dm.config, o.heldout_every, train, held);
  const double r0 = mean_one_step_reward(dm, rm, held, tc, o.seed + 7);
  const auto history = tune(dm, rm, train, tc, out / "checkpoints");
  std::vector<json> rows(history.begin(), history.end());
  write_ndjson(out / "history.ndjson", rows);
  save_diffusion_model(out / "tuned.ckpt", dm);
  const double r1 = mean_one_step_reward(dm, rm, held, tc, o.seed + 7);
  write_json(out / "summary.json", {{"mode", tc.mode},
                                    {"config", tc},
                                    {"heldout_reward_before", r0},
                                    {"heldout_reward_after", r1},
                                    {"heldout_l_pt", heldout_pretrain_loss(dm, held, o.seed + 1)}});
  write_manifest(out, "tune-mvp", cfg, o.seed, cfile);
  log("tune-mvp", "held-out one-step reward " + format_number(r0) + " -> " + format_number(r1));
}

// ---------------------------------------------------------------------------

struct EvaluateOpts {
  std::string scores, human, choices, out;
};

void evaluate_cmd(const EvaluateOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  const fs::path out = P(o.out);
  const auto tables = tables_from_scores(read_records<ScoreRecord>(P(o.scores)));
  const auto favor = o.human.empty() ? std::map<std::string, double>{} : read_human_favor(P(o.human));
  const auto rep = rank_methods(tables, favor);
  json j = rep;
  std::string text = report_text(rep);
  if (!o.choices.empty()) {
    const auto wm = win_matrix(read_comparison_choices(P(o.choices)));
    j["win_rates"] = wm;
    text += "\nwin / tie / loss (row metric vs column metric, against human choices)\n";
    for (const auto& [a, row] : wm)
      for (const auto& [b, w] : row)
        text += a + " vs " + b + ": " + std::to_string(w.wins) + " / " + std::to_string(w.ties) + " / " +
                std::to_string(w.losses) + "\n";
  }
  write_json(out / "report.json", j);
  write_text(out / "report.txt", text);
  write_manifest(out, "evaluate", cfg, 0, cfile);
  std::cout << text;
}

// ---------------------------------------------------------------------------

struct ReportOpts {
  std::string in, history, out;
};

void report_cmd(const ReportOpts& o, const Paths& P, const json& cfg, const std::string& cfile) {
  if (o.in.empty() && o.history.empty()) throw ValidationError("report needs --in, --history, or both");
  const fs::path out = P(o.out);
  std::vector<std::string> written;
  if (!o.in.empty()) {
    std::ifstream in(P(o.in));
    if (!in) throw LoadError("cannot read " + P(o.in).string());
    const json j = json::parse(in);
    if (j.is_object() && j.contains("metrics")) {
      std::vector<std::pair<std::string, double>> bars;
      for (const auto& m : j.at("metrics")) {
        if (!m.at("spearman_to_human").is_null()) bars.emplace_back(m.at("metric_id"), m.at("spearman_to_human"));
        std::vector<std::pair<std::string, double>> means;
        for (const auto& [method, v] : m.at("mean").items()) means.emplace_back(method, v.get<double>());
        const std::string name = "mean_" + sanitize_id(m.at("metric_id").get<std::string>()) + ".svg";
        write_text(out / name, bar_chart_svg("Mean " + m.at("metric_id").get<std::string>() + " per method", means));
        written.push_back(name);
      }
      if (!bars.empty()) {
        write_text(out / "spearman.svg", bar_chart_svg("Spearman to human ranking", bars));
        written.push_back("spearman.svg");
      }
    } else if (j.is_array()) {
      std::vector<std::pair<std::string, double>> pair_acc, mod_acc;
      for (const auto& r : j) {
        pair_acc.emplace_back(r.at("variant"), r.at("median_pair_accuracy"));
        mod_acc.emplace_back(r.at("variant"), r.at("median_modality_accuracy"));
      }
      write_text(out / "ablation_pair_accuracy.svg", bar_chart_svg("Median held-out pair accuracy", pair_acc));
      write_text(out / "ablation_modality_accuracy.svg", bar_chart_svg("Median modality-order accuracy", mod_acc));
      written.insert(written.end(), {"ablation_pair_accuracy.svg", "ablation_modality_accuracy.svg"});
    } else {
      throw ValidationError(o.in + ": expected an evaluate report or an ablation table");
    }
  }
  if (!o.history.empty()) {
    std::vector<std::pair<std::string, std::vector<double>>> reward, lpt;
    for (const auto& h : split_list(o.history)) {
      const fs::path path = P(h);
      const std::string label = path.parent_path().filename().string().empty() ? h : path.parent_path().filename().string();
      std::vector<double> r, l;
      for (const auto& row : read_ndjson(path)) {
        r.push_back(row.at("mean_reward"));
        l.push_back(row.at("l_pt"));
      }
      reward.emplace_back(label, r);
      lpt.emplace_back(label, l);
    }
    write_text(out / "reward_curve.svg", line_chart_svg("Mean reward per tuning step", reward));
    write_text(out / "lpt_curve.svg", line_chart_svg("Denoising loss per tuning step", lpt));
    written.insert(written.end(), {"reward_curve.svg", "lpt_curve.svg"});
  }
  write_manifest(out, "report", cfg, 0, cfile);
  for (const auto& w : written) std::cout << (out / w).string() << "\n";
}

// ---------------------------------------------------------------------------

std::string error_code(const std::exception& e) {
  if (const auto* a = dynamic_cast<const AnnotationError*>(&e)) return a->code();
  if (dynamic_cast<const ValidationError*>(&e)) return "validation_error";
  if (dynamic_cast<const LoadError*>(&e)) return "load_error";
  if (dynamic_cast<const ImageError*>(&e)) return "image_error";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape_error";
  if (dynamic_cast<const json::exception*>(&e)) return "parse_error";
  return "internal";
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Multi-view reward modeling and reward-feedback tuning toolkit", "mvp"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  Paths paths;
  app.add_option("--data-root", paths.root, "base directory for relative paths")->envname("MVP_DATA_ROOT");

  std::map<std::string, Registry> regs;
  auto sub = [&](const std::string& name, const std::string& desc) {
    auto* s = app.add_subcommand(name, desc);
    s->add_option("--config", "JSON file of flag values; explicit flags take precedence");
    return s;
  };

  PrepareOpts prep;
  {
    auto* s = sub("prepare-data", "build a synthetic prompt/asset/ranking corpus");
    auto& r = regs["prepare-data"];
    r.option(s, "out", prep.out, "output directory")->required();
    r.option(s, "prompts", prep.prompts, "number of prompts");
    r.option(s, "image-size", prep.image_size, "image side in pixels");
    r.option(s, "views", prep.views, "views per domain");
    r.option(s, "annotators", prep.annotators, "simulated annotators per asset list");
    r.option(s, "annotator-noise", prep.noise, "std-dev of perceived quality");
    r.option(s, "tie-threshold", prep.tie, "perceived gap below which assets tie");
    r.option(s, "min-gap", prep.min_gap, "minimum true quality gap for kept pairs");
    r.option(s, "seed", prep.seed, "corpus seed");
  }
  ServeOpts serve;
  {
    auto* s = sub("serve-annotations", "host the annotation HTTP service");
    auto& r = regs["serve-annotations"];
    r.option(s, "data", serve.data, "directory with asset_lists.ndjson and assets/")->required();
    r.option(s, "annotators", serve.annotators, "comma list of id[:role] to pre-register");
    r.option(s, "journal", serve.journal, "journal file (default <data>/annotation_journal.ndjson)");
    r.option(s, "host", serve.host, "bind address");
    r.option(s, "port", serve.port, "port; 0 picks a free one");
    r.option(s, "cap", serve.cap, "asset lists per annotator");
    r.option(s, "seed", serve.seed, "presentation-order seed");
  }
  AggregateOpts agg;
  {
    auto* s = sub("aggregate", "Borda-aggregate ranking records into comparison pairs");
    auto& r = regs["aggregate"];
    r.option(s, "in", agg.in, "ranking records (ndjson)")->required();
    r.option(s, "out", agg.out, "comparison pairs (ndjson)")->required();
    r.option(s, "lists", agg.lists, "asset lists (ndjson) mapping list ids to prompt ids");
    r.option(s, "aggregated", agg.aggregated, "also write per-list consensus rankings here");
  }
  TrainOpts train;
  {
    auto* s = sub("train-reward", "train the multi-view reward model");
    auto& r = regs["train-reward"];
    r.option(s, "data", train.data, "corpus directory")->required();
    r.option(s, "pairs", train.pairs, "comparison pairs (default <data>/pairs.ndjson)");
    r.option(s, "out", train.out, "output directory")->required();
    r.option(s, "backbone", train.backbone, "checkpoint whose encoder weights initialize the model");
    r.option(s, "seed", train.seed, "init and batching seed");
    r.option(s, "split-seed", train.split_seed, "train/val/test split seed");
    add_reward_options(s, r, train.r);
  }
  EvalRewardOpts evr;
  {
    auto* s = sub("eval-reward", "score held-out pairs and run ablations");
    auto& r = regs["eval-reward"];
    r.option(s, "data", evr.data, "corpus directory")->required();
    r.option(s, "pairs", evr.pairs, "comparison pairs to evaluate (default <data>/pairs.ndjson)");
    r.option(s, "model", evr.model, "reward checkpoint to evaluate");
    r.option(s, "out", evr.out, "output directory")->required();
    r.flag(s, "ablations", evr.ablations, "train base and ablated variants over --seeds");
    r.option(s, "seeds", evr.seeds, "comma list of ablation seeds");
    r.option(s, "backbone", evr.backbone, "encoder checkpoint for the backbone-init base");
    add_reward_options(s, r, evr.r);
  }
  PretrainOpts pre;
  {
    auto* s = sub("pretrain-dm", "pretrain the toy multi-view diffusion model");
    auto& r = regs["pretrain-dm"];
    r.option(s, "data", pre.data, "corpus directory")->required();
    r.option(s, "out", pre.out, "output directory")->required();
    r.option(s, "steps", pre.steps, "optimizer steps");
    r.option(s, "batch", pre.batch, "items per step");
    r.option(s, "lr", pre.lr, "base learning rate (cosine decay)");
    r.option(s, "T", pre.T, "diffusion steps");
    r.option(s, "schedule", pre.schedule, "beta schedule")->check(CLI::IsMember({"linear", "cosine"}));
    r.option(s, "token-dim", pre.token_dim, "token width");
    r.option(s, "heads", pre.heads, "attention heads");
    r.option(s, "patch", pre.patch, "latent patch size");
    r.flag(s, "latent", pre.latent, "denoise a downsampled latent with a learned decoder");
    r.option(s, "decoder-hidden", pre.decoder_hidden, "decoder width in latent mode");
    r.option(s, "heldout-every", pre.heldout_every, "hash bucket count; bucket 0 is held out");
    r.option(s, "samples", pre.samples, "held-out prompts to sample as PNG grids");
    r.option(s, "seed", pre.seed, "init, batching and sampling seed");
  }
  TuneOpts tuneo;
  {
    auto* s = sub("tune-mvp", "reward-feedback tuning of a pretrained diffusion model");
    auto& r = regs["tune-mvp"];
    r.option(s, "data", tuneo.data, "corpus directory")->required();
    r.option(s, "dm", tuneo.dm, "pretrained diffusion checkpoint")->required();
    r.option(s, "reward", tuneo.reward, "reward checkpoint")->required();
    r.option(s, "out", tuneo.out, "output directory")->required();
    r.option(s, "mode", tuneo.mode, "mvp or pt-only")->check(CLI::IsMember({"mvp", "pt-only", "pt_only"}));
    r.option(s, "lambda", tuneo.lambda, "weight of the denoising term");
    r.option(s, "psi", tuneo.psi, "reward-to-loss map")->check(CLI::IsMember({"negated", "softplus_negated"}));
    r.option(s, "midstep", tuneo.midstep, "progress range lo,hi for the mid step");
    r.option(s, "steps", tuneo.steps, "optimizer steps");
    r.option(s, "lr", tuneo.lr, "learning rate");
    r.option(s, "warmup", tuneo.warmup, "linear warmup steps");
    r.option(s, "batch", tuneo.batch, "items per step");
    r.option(s, "scope", tuneo.scope, "comma list of trainable parameter prefixes, e.g. cross_view.,mlp.,out.")->required();
    r.option(s, "checkpoint-every", tuneo.checkpoint_every, "write a checkpoint every N steps (0: never)");
    r.option(s, "heldout-every", tuneo.heldout_every, "hash bucket count used for held-out prompts");
    r.option(s, "seed", tuneo.seed, "sampling seed");
  }
  EvaluateOpts ev;
  {
    auto* s = sub("evaluate", "rank methods per metric against human preference");
    auto& r = regs["evaluate"];
    r.option(s, "scores", ev.scores, "score records (ndjson)")->required();
    r.option(s, "human", ev.human, "human favor or rank per method (ndjson)");
    r.option(s, "choices", ev.choices, "per-comparison choices for win rates (ndjson)");
    r.option(s, "out", ev.out, "output directory")->required();
  }
  ReportOpts rep;
  {
    auto* s = sub("report", "emit SVG charts from report data");
    auto& r = regs["report"];
    r.option(s, "in", rep.in, "report.json from evaluate or ablations.json from eval-reward");
    r.option(s, "history", rep.history, "comma list of tuning history files");
    r.option(s, "out", rep.out, "output directory")->required();
  }

  std::set<std::string> names;
  for (const auto& [n, _] : regs) names.insert(n);
  std::string config_file, subcommand = "mvp";
  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(std::move(args), names, config_file);
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", error_code(e)}, {"message", e.what()}, {"subcommand", subcommand}}}}.dump() << "\n";
    return 1;
  }

  try {
    subcommand = app.get_subcommands().front()->get_name();
    const json cfg = regs.at(subcommand).resolved();
    if (subcommand == "prepare-data") prepare_data(prep, paths, cfg, config_file);
    else if (subcommand == "serve-annotations") serve_annotations(serve, paths, cfg, config_file);
    else if (subcommand == "aggregate") aggregate(agg, paths, cfg, config_file);
    else if (subcommand == "train-reward") train_reward_cmd(train, paths, cfg, config_file);
    else if (subcommand == "eval-reward") eval_reward_cmd(evr, paths, cfg, config_file);
    else if (subcommand == "pretrain-dm") pretrain_dm_cmd(pre, paths, cfg, config_file);
    else if (subcommand == "tune-mvp") tune_mvp_cmd(tuneo, paths, cfg, config_file);
    else if (subcommand == "evaluate") evaluate_cmd(ev, paths, cfg, config_file);
    else if (subcommand == "report") report_cmd(rep, paths, cfg, config_file);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", error_code(e)}, {"message", e.what()}, {"subcommand", subcommand}}}}.dump() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mvp::cli

int main(int argc, char** argv) { return mvp::cli::run(argc, argv); }
