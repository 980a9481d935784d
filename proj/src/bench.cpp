// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "lers/dimsearch.hpp"
#include "lers/pruning.hpp"

namespace lers::bench {

namespace {

std::string number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto s = trim(text);
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(std::string(key) + ": cannot parse '" + s + "'");
  }
  return v;
}

bool parse_flag(std::string_view key, std::string_view text) {
  const auto s = trim(text);
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw ConfigError(std::string(key) + ": expected on/off, got '" + s + "'");
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? std::string(1, sep) : "") + parts[i];
  return out;
}

Index default_dim(BackboneKind b) {
  switch (b) {
    case BackboneKind::NeuMf: return 32;
    case BackboneKind::LightGcn: return 64;
    default: return 16;
  }
}

std::vector<std::size_t> default_mlp(BackboneKind b) {
  switch (b) {
    case BackboneKind::NeuMf: return {64, 32, 16};
    case BackboneKind::DeepFm: return {400, 400, 400};
    case BackboneKind::DcnMix: return {512, 512};
    default: return {};
  }
}

std::vector<std::string> tunable(BackboneKind b) {
  switch (b) {
    case BackboneKind::LightGcn: return {"lr", "l2", "layers", "gamma"};
    case BackboneKind::NeuMf: return {"lr", "l2", "dropout", "negatives"};
    default: return {"lr", "l2", "dropout"};
  }
}

InteractionSet merged(const InteractionSet& a, const InteractionSet& b) {
  InteractionSet out = a;
  out.pairs.insert(out.pairs.end(), b.pairs.begin(), b.pairs.end());
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

std::vector<Index> unique_ids(std::vector<Index> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Training loop shared by every pipeline.

struct StepExtras {
  double table_penalty = 0;  // weight of Σ table l2 (soft-threshold phases)
  double cerp_weight = 0;
  std::function<void()> before_batch = {};
  StepHook after_step = {};
};

class Session {
 public:
  Session(const ExperimentConfig& cfg, const Dataset& data, Backbone& model) : cfg_(cfg), data_(data), model_(model) {
    if (data.cf) index_.emplace(data.cf->train);
  }

  ad::Var loss(const ad::Var& task, const StepExtras& extras, const std::vector<Index>& ids) {
    ad::Var loss = task;
    if (cfg_.l2 > 0) loss = ad::add(loss, ad::scale(model_.l2_penalty(), cfg_.l2));
    for (auto& table : model_.embeddings()) {
      if (extras.table_penalty > 0) loss = ad::add(loss, ad::scale(table->l2_penalty(), extras.table_penalty));
      if (extras.cerp_weight > 0) {
        if (auto* cerp = dynamic_cast<CerpTable*>(table.get()); cerp && !cerp->frozen()) {
          auto [a, b] = cerp->parts(ids);
          loss = ad::add(loss, cerp_regularizer(a, b, extras.cerp_weight));
        }
      }
    }
    return loss;
  }

  void epoch(std::span<Adam* const> opts, std::mt19937_64& rng, const StepExtras& extras) {
    auto step = [&](const ad::Var& task, const std::vector<Index>& ids) {
      ad::backward(loss(task, extras, ids));
      for (auto* o : opts) o->step();
      return extras.after_step && extras.after_step();
    };
    if (data_.cf) {
      auto& m = dynamic_cast<CfBackbone&>(model_);
      for (const auto& b : make_cf_batches(data_.cf->train, *index_, cfg_.batch_size, cfg_.negatives, rng)) {
        if (extras.before_batch) extras.before_batch();
        for (auto* o : opts) o->zero_grad();
        std::vector<Index> ids;
        if (extras.cerp_weight > 0) {
          ids = b.users;
          for (auto v : b.positives) ids.push_back(m.num_users() + v);
          for (auto v : b.negatives) ids.push_back(m.num_users() + v);
          ids = unique_ids(std::move(ids));
        }
        if (step(m.task_loss(b, rng), ids)) return;
      }
    } else {
      auto& m = dynamic_cast<CtrBackbone&>(model_);
      for (const auto& b : make_ctr_batches(data_.ctr->train, cfg_.batch_size, &rng)) {
        if (extras.before_batch) extras.before_batch();
        for (auto* o : opts) o->zero_grad();
        std::vector<Index> ids;
        if (extras.cerp_weight > 0) ids = unique_ids(b.features);
        if (step(m.task_loss(b, rng), ids)) return;
      }
    }
  }

  void train(Adam& opt, int epochs, std::mt19937_64& rng) {
    Adam* opts[] = {&opt};
    for (int e = 0; e < epochs; ++e) epoch(opts, rng, {});
  }

 private:
  const ExperimentConfig& cfg_;
  const Dataset& data_;
  Backbone& model_;
  std::optional<UserItemIndex> index_;
};

// Main parameters and soft thresholds get separate optimizers so the
// thresholds can move at their own rate.
struct SplitOptimizers {
  Adam main;
  Adam thresholds;
};

SplitOptimizers split_optimizers(Backbone& model, const ExperimentConfig& cfg) {
  std::set<const ad::Node*> thr;
  for (auto& t : model.embeddings()) {
    if (auto* s = dynamic_cast<StrTable*>(t.get())) thr.insert(s->threshold().node());
    if (auto* c = dynamic_cast<CerpTable*>(t.get())) {
      thr.insert(c->s1().node());
      thr.insert(c->s2().node());
    }
  }
  std::vector<Parameter> main, thresholds;
  for (auto& p : model.parameters()) (thr.count(p.var.node()) ? thresholds : main).push_back(p);
  return {Adam(std::move(main), cfg.lr), Adam(std::move(thresholds), cfg.threshold_lr)};
}

std::vector<Supernet*> supernets(Backbone& model) {
  std::vector<Supernet*> out;
  for (auto& t : model.embeddings()) out.push_back(&dynamic_cast<Supernet&>(*t));
  return out;
}

void mirror(const std::vector<Supernet*>& nets) {
  for (std::size_t k = 1; k < nets.size(); ++k) {
    nets[k]->set_dims(nets[0]->dims());
    nets[k]->set_row_mask(nets[0]->row_mask());
  }
}

FieldLayout supernet_layout(const Dataset& data) {
  if (data.cf) return FieldLayout::from_sizes({data.cf->train.num_users, data.cf->train.num_items});
  return data.ctr->vocab.layout;
}

TableFactory factory(LayerKind kind, const ExperimentConfig& cfg, const Dataset& data) {
  LayerOptions opts;
  opts.target = cfg.target;
  opts.stddev = cfg.init_stddev;
  opts.str_init = cfg.str_init;
  if (kind == LayerKind::Supernet) opts.layout = supernet_layout(data);
  return [kind, opts](const EmbeddingSpec& spec, std::mt19937_64& rng) { return make_layer(kind, spec, opts, rng); };
}

LayerKind layer_kind(Compressor c) {
  switch (c) {
    case Compressor::Qr: return LayerKind::Qr;
    case Compressor::Tt: return LayerKind::Tt;
    case Compressor::Dhe: return LayerKind::Dhe;
    case Compressor::Cerp: return LayerKind::Cerp;
    case Compressor::OptEmbed: return LayerKind::Supernet;
    default: return LayerKind::Full;
  }
}

std::vector<std::int64_t> id_frequencies(const Dataset& data) {
  if (data.cf) return data.cf->frequencies();
  const auto& f = data.ctr->vocab.frequencies;
  return {f.begin(), f.end()};
}

double primary_on_valid(const ExperimentConfig& cfg, const Dataset& data, const Backbone& model) {
  const auto metrics = evaluate_model(cfg, data, model, false);
  const auto name = cfg.primary_metric();
  for (const auto& [k, v] : metrics)
    if (k == name) return v;
  throw std::logic_error("primary metric missing");
}

std::unique_ptr<Backbone> pep_pipeline(const ExperimentConfig& cfg, const Dataset& data, std::mt19937_64& rng) {
  auto model = build_model(cfg, data, factory(LayerKind::Full, cfg, data), rng);
  const auto theta0 = snapshot_values(model->parameters());
  const auto indices = model->embedding_param_indices();

  std::vector<StrTable*> tables;
  for (std::size_t k = 0; k < model->embeddings().size(); ++k) {
    const auto spec = model->embeddings()[k]->spec();
    auto str = std::make_unique<StrTable>(spec, theta0[indices[k]], Tensor({1, 1}, cfg.str_init));
    tables.push_back(str.get());
    model->set_embedding(k, std::move(str));
  }
  Session session(cfg, data, *model);
  auto opts = split_optimizers(*model, cfg);
  Adam* both[] = {&opts.main, &opts.thresholds};
  const StrSchedule schedule{cfg.search_epochs, cfg.str_penalty, cfg.penalty_growth};
  const auto snapshot = pep_find_mask(tables, theta0, cfg.target, schedule, [&](double penalty, const StepHook& hook) {
    session.epoch(both, rng, {.table_penalty = penalty, .after_step = hook});
  });

  // Lottery-ticket retrain from the same initialization.
  for (std::size_t k = 0; k < model->embeddings().size(); ++k) {
    const auto spec = model->embeddings()[k]->spec();
    model->set_embedding(k, std::make_unique<FullTable>(spec, theta0[indices[k]]));
  }
  Adam opt(model->parameters(), cfg.lr);
  Adam* one[] = {&opt};
  retrain_with_mask(snapshot, opt, indices, cfg.epochs,
                    [&](const StepHook& hook) { session.epoch(one, rng, {.after_step = hook}); });
  for (std::size_t k = 0; k < model->embeddings().size(); ++k) {
    const auto& full = dynamic_cast<const FullTable&>(*model->embeddings()[k]);
    model->set_embedding(k, CsrTable::from_dense(full.spec(), full.weights(), snapshot.masks[k]));
  }
  return model;
}

std::unique_ptr<Backbone> cerp_pipeline(const ExperimentConfig& cfg, const Dataset& data, std::mt19937_64& rng) {
  auto model = build_model(cfg, data, factory(LayerKind::Cerp, cfg, data), rng);
  Session session(cfg, data, *model);
  auto opts = split_optimizers(*model, cfg);
  Adam* both[] = {&opts.main, &opts.thresholds};
  const StrSchedule schedule{cfg.search_epochs, cfg.str_penalty, cfg.penalty_growth};
  int used = 0;
  for (auto& table : model->embeddings()) {
    auto& cerp = dynamic_cast<CerpTable&>(*table);
    const auto r = cerp_prune(cerp, cfg.target, schedule, [&](double penalty, const StepHook& hook) {
      session.epoch(both, rng, {.table_penalty = penalty, .cerp_weight = cfg.cerp_weight, .after_step = hook});
    });
    used += r.epochs;
  }
  for (int e = used; e < cfg.epochs; ++e) session.epoch(both, rng, {});
  return model;
}

std::unique_ptr<Backbone> optembed_pipeline(const ExperimentConfig& cfg, const Dataset& data, std::mt19937_64& rng) {
  auto model = build_model(cfg, data, factory(LayerKind::Supernet, cfg, data), rng);
  auto nets = supernets(*model);
  const auto dist = GeometricDimDistribution::for_sparsity(nets[0]->d(), cfg.target);
  Session session(cfg, data, *model);
  Adam opt(model->parameters(), cfg.lr);
  Adam* one[] = {&opt};
  train_supernet(*nets[0], dist, cfg.supernet_epochs ? cfg.supernet_epochs : cfg.epochs, rng,
                 [&](const std::function<void()>& before_batch) {
                   session.epoch(one, rng, {.before_batch = [&] {
                                   before_batch();
                                   mirror(nets);
                                 }});
                 });
  mirror(nets);

  SearchConfig search;
  search.population = cfg.population;
  search.generations = cfg.generations;
  search.target = cfg.target;
  search.feature_mask = cfg.feature_mask;
  const auto found = evolutionary_search(
      *nets[0], dist, search,
      [&](Supernet&) {
        mirror(nets);
        return primary_on_valid(cfg, data, *model);
      },
      rng);

  // Retrain the found architecture from a fresh initialization.
  std::mt19937_64 rng2(cfg.seed);
  auto fresh = build_model(cfg, data, factory(LayerKind::Supernet, cfg, data), rng2);
  for (auto* net : supernets(*fresh)) {
    net->set_dims(found.best.dims);
    net->set_row_mask(found.row_keep);
  }
  Session retrain(cfg, data, *fresh);
  Adam opt2(fresh->parameters(), cfg.lr);
  retrain.train(opt2, cfg.epochs, rng2);
  return fresh;
}

// Trains the configured pipeline; `profiles` collects the TT cache build.
std::unique_ptr<Backbone> train_model(const ExperimentConfig& cfg, const Dataset& data,
                                      std::vector<ProfileResult>* profiles) {
  std::mt19937_64 rng(cfg.seed);
  switch (cfg.compressor) {
    case Compressor::Pep: return pep_pipeline(cfg, data, rng);
    case Compressor::Cerp: return cerp_pipeline(cfg, data, rng);
    case Compressor::OptEmbed: return optembed_pipeline(cfg, data, rng);
    default: break;
  }
  auto model = build_model(cfg, data, factory(layer_kind(cfg.compressor), cfg, data), rng);
  if (cfg.compressor == Compressor::Tt) {
    const auto freq = id_frequencies(data);
    std::size_t rows = 0;
    memory::reset_peak();
    const auto start = std::chrono::steady_clock::now();
    for (auto& t : model->embeddings()) {
      auto& tt = dynamic_cast<TtTable&>(*t);
      tt.build_cache(freq);
      rows += static_cast<std::size_t>(tt.cache_capacity());
    }
    if (profiles) profiles->push_back({"build cache", ms_since(start), memory::peak_bytes(), rows, 1});
  }
  Session session(cfg, data, *model);
  Adam opt(model->parameters(), cfg.lr);
  session.train(opt, cfg.epochs, rng);
  if (cfg.compressor == Compressor::MagPrune) prune_model(*model, cfg.target, cfg.n_min);
  return model;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view task_name(Task task) { return task == Task::Cf ? "cf" : "ctr"; }

Task parse_task(std::string_view name) {
  if (name == "cf") return Task::Cf;
  if (name == "ctr") return Task::Ctr;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected cf or ctr)");
}

namespace {
constexpr std::pair<Compressor, std::string_view> kCompressors[] = {
    {Compressor::None, "none"}, {Compressor::Qr, "qr"},     {Compressor::Tt, "tt"},
    {Compressor::Dhe, "dhe"},   {Compressor::Pep, "pep"},   {Compressor::OptEmbed, "optembed"},
    {Compressor::Cerp, "cerp"}, {Compressor::MagPrune, "magprune"},
};
}  // namespace

std::string_view compressor_name(Compressor c) {
  for (const auto& [k, name] : kCompressors)
    if (k == c) return name;
  return "?";
}

Compressor parse_compressor(std::string_view name) {
  for (const auto& [k, n] : kCompressors)
    if (n == name) return k;
  throw ConfigError("unknown compressor '" + std::string(name) + "'");
}

bool is_pruning(Compressor c) { return c == Compressor::Pep || c == Compressor::Cerp || c == Compressor::MagPrune; }

void ExperimentConfig::validate() const {
  if (is_cf(backbone) != (task == Task::Cf)) {
    throw ConfigError(std::string(backbone_name(backbone)) + " is not a " + std::string(task_name(task)) + " backbone");
  }
  if (compressor != Compressor::None && !(target >= 0 && target < 1)) {
    throw ConfigError("sparsity must lie in [0, 1)");
  }
  if (data.empty()) throw ConfigError("no data path given");
  if (task == Task::Ctr && schema.empty()) throw ConfigError("ctr data needs a schema");
  if (epochs < 0 || batch_size == 0) throw ConfigError("epochs must be >= 0 and batch size >= 1");
  if (!(valid_fraction >= 0 && valid_fraction < 1) || !(test_fraction > 0 && test_fraction < 1) ||
      valid_fraction + test_fraction >= 1) {
    throw ConfigError("split fractions must leave a non-empty train split");
  }
  if (!(lr > 0) || !(l2 >= 0) || !(dropout >= 0 && dropout < 1) || negatives == 0 || topk == 0) {
    throw ConfigError("lr > 0, l2 >= 0, dropout in [0, 1), negatives >= 1 and topk >= 1 are required");
  }
  if (layers < 1 || !(gamma >= 0) || !(tau > 0) || !(init_stddev > 0) || dim < 0) {
    throw ConfigError("layers >= 1, gamma >= 0, tau > 0, init-stddev > 0 and dim >= 0 are required");
  }
  if (search_epochs < 1 || !(str_penalty >= 0) || !(penalty_growth >= 1) || !(threshold_lr > 0) ||
      !(cerp_weight >= 0) || supernet_epochs < 0 || population < 2 || generations < 1 || n_min < 0) {
    throw ConfigError("invalid method setting");
  }
  if (tuning) {
    if (valid_fraction <= 0) throw ConfigError("tuning needs a validation split");
    if (trials == 0 || tune_epochs < 0) throw ConfigError("tuning needs trials >= 1");
    const auto allowed = tunable(backbone);
    for (const auto& p : tune_params) {
      if (std::find(allowed.begin(), allowed.end(), p) == allowed.end()) {
        throw ConfigError("cannot tune '" + p + "' for " + std::string(backbone_name(backbone)));
      }
    }
    if (tune_params.empty()) throw ConfigError("tuning needs at least one parameter");
  }
  if (profile_batch == 0 || profile_reps < 1) throw ConfigError("profile batch and repetitions must be >= 1");
  if (baseline && !(*baseline > 0)) throw ConfigError("baseline metric must be positive");
}

std::string ExperimentConfig::dataset_name() const {
  if (!dataset.empty()) return dataset;
  auto dir = data.parent_path().filename().string();
  return dir.empty() ? data.stem().string() : dir;
}

std::string ExperimentConfig::primary_metric() const {
  return task == Task::Cf ? "ndcg@" + std::to_string(topk) : "auc";
}

void apply_setting(ExperimentConfig& cfg, std::string_view key_in, std::string_view value_in) {
  const std::string key = trim(key_in);
  const std::string value = trim(value_in);
  auto num = [&]<typename T>(T& field) { field = parse_number<T>(key, value); };
  if (key == "task") cfg.task = parse_task(value);
  else if (key == "backbone") {
    try {
      cfg.backbone = parse_backbone(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "compressor") cfg.compressor = parse_compressor(value);
  else if (key == "sparsity") num(cfg.target);
  else if (key == "data") cfg.data = value;
  else if (key == "schema") cfg.schema = value;
  else if (key == "dataset") cfg.dataset = value;
  else if (key == "seed") num(cfg.seed);
  else if (key == "split-seed") num(cfg.split_seed);
  else if (key == "epochs") num(cfg.epochs);
  else if (key == "batch-size") num(cfg.batch_size);
  else if (key == "valid-fraction") num(cfg.valid_fraction);
  else if (key == "test-fraction") num(cfg.test_fraction);
  else if (key == "min-freq") num(cfg.min_freq);
  else if (key == "dim") num(cfg.dim);
  else if (key == "mlp") {
    cfg.mlp.clear();
    if (!value.empty())
      for (const auto& p : split(value, ',')) cfg.mlp.push_back(parse_number<std::size_t>(key, p));
  } else if (key == "lr") num(cfg.lr);
  else if (key == "l2") num(cfg.l2);
  else if (key == "dropout") num(cfg.dropout);
  else if (key == "negatives") num(cfg.negatives);
  else if (key == "topk") num(cfg.topk);
  else if (key == "layers") num(cfg.layers);
  else if (key == "gamma") num(cfg.gamma);
  else if (key == "tau") num(cfg.tau);
  else if (key == "init-stddev") num(cfg.init_stddev);
  else if (key == "n-min") num(cfg.n_min);
  else if (key == "search-epochs") num(cfg.search_epochs);
  else if (key == "str-penalty") num(cfg.str_penalty);
  else if (key == "penalty-growth") num(cfg.penalty_growth);
  else if (key == "threshold-lr") num(cfg.threshold_lr);
  else if (key == "str-init") num(cfg.str_init);
  else if (key == "cerp-weight") num(cfg.cerp_weight);
  else if (key == "supernet-epochs") num(cfg.supernet_epochs);
  else if (key == "population") num(cfg.population);
  else if (key == "generations") num(cfg.generations);
  else if (key == "feature-mask") cfg.feature_mask = parse_flag(key, value);
  else if (key == "tune") cfg.tuning = parse_flag(key, value);
  else if (key == "trials") num(cfg.trials);
  else if (key == "tune-epochs") num(cfg.tune_epochs);
  else if (key == "tune-params") cfg.tune_params = value.empty() ? std::vector<std::string>{} : split(value, ',');
  else if (key == "profile") cfg.profile = parse_flag(key, value);
  else if (key == "profile-batch") num(cfg.profile_batch);
  else if (key == "profile-reps") num(cfg.profile_reps);
  else if (key == "out") cfg.out = value;
  else if (key == "checkpoint") cfg.checkpoint = value;
  else if (key == "baseline") {
    if (value.empty()) cfg.baseline.reset();
    else cfg.baseline = parse_number<double>(key, value);
  } else throw ConfigError("unknown setting '" + key + "'");
}

ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    apply_setting(base, t.substr(0, eq), t.substr(eq + 1));
  }
  return base;
}

std::string format_settings(const ExperimentConfig& c) {
  std::vector<std::string> mlp;
  for (auto m : c.mlp) mlp.push_back(std::to_string(m));
  std::ostringstream os;
  auto kv = [&](std::string_view k, const std::string& v) { os << k << '=' << v << '\n'; };
  kv("task", std::string(task_name(c.task)));
  kv("backbone", std::string(backbone_name(c.backbone)));
  kv("compressor", std::string(compressor_name(c.compressor)));
  kv("sparsity", number(c.target));
  kv("data", c.data.string());
  kv("schema", c.schema.string());
  kv("dataset", c.dataset);
  kv("seed", std::to_string(c.seed));
  kv("split-seed", std::to_string(c.split_seed));
  kv("epochs", std::to_string(c.epochs));
  kv("batch-size", std::to_string(c.batch_size));
  kv("valid-fraction", number(c.valid_fraction));
  kv("test-fraction", number(c.test_fraction));
  kv("min-freq", std::to_string(c.min_freq));
  kv("dim", std::to_string(c.dim));
  kv("mlp", join(mlp, ','));
  kv("lr", number(c.lr));
  kv("l2", number(c.l2));
  kv("dropout", number(c.dropout));
  kv("negatives", std::to_string(c.negatives));
  kv("topk", std::to_string(c.topk));
  kv("layers", std::to_string(c.layers));
  kv("gamma", number(c.gamma));
  kv("tau", number(c.tau));
  kv("init-stddev", number(c.init_stddev));
  kv("n-min", std::to_string(c.n_min));
  kv("search-epochs", std::to_string(c.search_epochs));
  kv("str-penalty", number(c.str_penalty));
  kv("penalty-growth", number(c.penalty_growth));
  kv("threshold-lr", number(c.threshold_lr));
  kv("str-init", number(c.str_init));
  kv("cerp-weight", number(c.cerp_weight));
  kv("supernet-epochs", std::to_string(c.supernet_epochs));
  kv("population", std::to_string(c.population));
  kv("generations", std::to_string(c.generations));
  kv("feature-mask", c.feature_mask ? "on" : "off");
  kv("tune", c.tuning ? "on" : "off");
  kv("trials", std::to_string(c.trials));
  kv("tune-epochs", std::to_string(c.tune_epochs));
  kv("tune-params", join(c.tune_params, ','));
  kv("profile", c.profile ? "on" : "off");
  kv("profile-batch", std::to_string(c.profile_batch));
  kv("profile-reps", std::to_string(c.profile_reps));
  kv("out", c.out.string());
  kv("checkpoint", c.checkpoint.string());
  kv("baseline", c.baseline ? number(*c.baseline) : "");
  return os.str();
}

// ---------------------------------------------------------------------------

std::vector<std::int64_t> CfData::frequencies() const {
  std::vector<std::int64_t> f(static_cast<std::size_t>(train.num_users + train.num_items), 0);
  for (const auto& p : train.pairs) {
    ++f[static_cast<std::size_t>(p.user)];
    ++f[static_cast<std::size_t>(train.num_users + p.item)];
  }
  return f;
}

Dataset load_dataset(const ExperimentConfig& cfg) {
  if (!std::filesystem::exists(cfg.data)) throw DataError("data file not found: " + cfg.data.string());
  Dataset out;
  out.task = cfg.task;
  out.name = cfg.dataset_name();
  if (cfg.task == Task::Cf) {
    const auto all = load_interactions(cfg.data);
    auto [rest, test] = split_per_user(all, 1 - cfg.test_fraction, cfg.split_seed);
    CfData cf;
    if (cfg.valid_fraction > 0) {
      auto [train, valid] = split_per_user(rest, 1 - cfg.valid_fraction / (1 - cfg.test_fraction), cfg.split_seed + 1);
      cf.train = std::move(train);
      cf.valid = std::move(valid);
    } else {
      cf.train = std::move(rest);
      cf.valid = InteractionSet{all.num_users, all.num_items, {}, SplitTag::Valid};
    }
    cf.train.tag = SplitTag::Train;
    cf.valid.tag = SplitTag::Valid;
    cf.test = std::move(test);
    cf.test.tag = SplitTag::Test;
    out.cf = std::move(cf);
  } else {
    if (!std::filesystem::exists(cfg.schema)) throw DataError("schema file not found: " + cfg.schema.string());
    CtrData ctr;
    ctr.schema = load_schema(cfg.schema);
    const auto records = load_ctr_records(cfg.data, ctr.schema);
    const SplitFractions f{1 - cfg.valid_fraction - cfg.test_fraction, cfg.valid_fraction, cfg.test_fraction};
    const auto parts = random_split(records, f, cfg.split_seed);
    if (parts[0].empty() || parts[2].empty()) throw DataError("too few records to split");
    ctr.vocab = build_vocab(parts[0], ctr.schema, cfg.min_freq);
    ctr.train = encode_records(parts[0], ctr.schema, ctr.vocab);
    ctr.valid = encode_records(parts[1], ctr.schema, ctr.vocab);
    ctr.test = encode_records(parts[2], ctr.schema, ctr.vocab);
    out.ctr = std::move(ctr);
  }
  return out;
}

std::unique_ptr<Backbone> build_model(const ExperimentConfig& cfg, const Dataset& data, const TableFactory& make_table,
                                      std::mt19937_64& rng) {
  const Index d = cfg.dim ? cfg.dim : default_dim(cfg.backbone);
  const auto mlp = cfg.mlp.empty() ? default_mlp(cfg.backbone) : cfg.mlp;
  if (is_cf(cfg.backbone)) {
    if (!data.cf) throw ConfigError("backbone needs interaction data");
    const auto& train = data.cf->train;
    const EmbeddingSpec spec{train.num_users + train.num_items, d};
    if (cfg.backbone == BackboneKind::NeuMf) {
      auto gmf = make_table(spec, rng);
      auto dnn = make_table(spec, rng);
      NeuMfConfig nc{train.num_users, train.num_items, d, mlp, cfg.dropout};
      return std::make_unique<NeuMf>(nc, std::move(gmf), std::move(dnn), rng);
    }
    LightGcnConfig lc{train.num_users, train.num_items, d, cfg.layers, cfg.gamma, cfg.tau};
    return std::make_unique<LightGcn>(lc, make_table(spec, rng), train);
  }
  if (!data.ctr) throw ConfigError("backbone needs ctr data");
  const auto& layout = data.ctr->vocab.layout;
  const EmbeddingSpec spec{layout.total(), d};
  auto table = make_table(spec, rng);
  if (cfg.backbone == BackboneKind::DeepFm) {
    return std::make_unique<DeepFm>(DeepFmConfig{d, mlp, cfg.dropout}, layout, std::move(table), rng);
  }
  DcnMixConfig dc;
  dc.d = d;
  dc.layers = cfg.layers;
  dc.mlp = mlp;
  dc.dropout = cfg.dropout;
  dc.rank = std::min<std::size_t>(dc.rank, layout.num_fields() * static_cast<std::size_t>(d) - 1);
  return std::make_unique<DcnMix>(dc, layout, std::move(table), rng);
}

UserScorer most_popular_scorer(const InteractionSet& train) {
  auto pop = std::make_shared<std::vector<Index>>(train.item_popularity());
  return [pop](Index, std::vector<Real>& scores) { scores.assign(pop->begin(), pop->end()); };
}

std::vector<std::pair<std::string, double>> evaluate_model(const ExperimentConfig& cfg, const Dataset& data,
                                                           const Backbone& model, bool on_test) {
  if (data.cf) {
    const auto& cf = *data.cf;
    const auto& m = dynamic_cast<const CfBackbone&>(model);
    const UserItemIndex seen(on_test ? merged(cf.train, cf.valid) : cf.train);
    const auto r = evaluate_ranking(m.make_scorer(), seen, on_test ? cf.test : cf.valid, cfg.topk);
    const auto k = std::to_string(cfg.topk);
    return {{"ndcg@" + k, r.ndcg}, {"recall@" + k, r.recall}};
  }
  const auto& records = on_test ? data.ctr->test : data.ctr->valid;
  const auto probs = dynamic_cast<const CtrBackbone&>(model).predict(records);
  return {{"auc", auc(probs, records.labels)}, {"logloss", log_loss(probs, records.labels)}};
}

// ---------------------------------------------------------------------------

ProfileResult profile_run(const std::string& phase, std::size_t batch_size, int repetitions,
                          const std::function<void()>& step) {
  for (int i = 0; i < kWarmups; ++i) step();
  memory::reset_peak();
  std::vector<double> times;
  for (int i = 0; i < std::max(repetitions, 1); ++i) {
    const auto start = std::chrono::steady_clock::now();
    step();
    times.push_back(ms_since(start));
  }
  return {phase, median_of(times), memory::peak_bytes(), batch_size, static_cast<int>(times.size())};
}

std::vector<ProfileResult> profile_model(const ExperimentConfig& cfg, const Dataset& data, Backbone& model) {
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<ProfileResult> out;
  Adam opt(model.parameters(), cfg.lr);
  auto train_step = [&](const std::function<ad::Var()>& task) {
    return [&, task] {
      opt.zero_grad();
      ad::Var loss = task();
      if (cfg.l2 > 0) loss = ad::add(loss, ad::scale(model.l2_penalty(), cfg.l2));
      ad::backward(loss);
      opt.step();
    };
  };
  if (data.cf) {
    auto& m = dynamic_cast<CfBackbone&>(model);
    const UserItemIndex index(data.cf->train);
    const auto batch = make_cf_batches(data.cf->train, index, cfg.profile_batch, cfg.negatives, rng).front();
    out.push_back(profile_run("train", batch.size(), cfg.profile_reps,
                              train_step([&] { return m.task_loss(batch, rng); })));
    out.push_back(profile_run("inference", static_cast<std::size_t>(m.num_users() + m.num_items()),
                              cfg.profile_reps, [&] { (void)m.make_scorer(); }));
  } else {
    auto& m = dynamic_cast<CtrBackbone&>(model);
    const auto batch = make_ctr_batches(data.ctr->train, cfg.profile_batch, nullptr).front();
    out.push_back(profile_run("train", batch.size(), cfg.profile_reps,
                              train_step([&] { return m.task_loss(batch, rng); })));
    const auto& src = data.ctr->test.size() ? data.ctr->test : data.ctr->train;
    const auto infer = make_ctr_batches(src, cfg.profile_batch, nullptr).front();
    out.push_back(profile_run("inference", infer.size(), cfg.profile_reps,
                              [&] { (void)ad::sigmoid(m.logits(infer, rng, false)); }));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string BenchReport::csv_header() const { return metrics.csv_header() + ",primary,baseline,retain,flagged"; }

std::string BenchReport::csv_row() const {
  return metrics.csv_row() + "," + primary + "," + (baseline ? number(*baseline) : "") + "," +
         (retain ? number(*retain) : "") + "," + (flagged ? "1" : "0");
}

double sparsity_tolerance(Compressor c, std::int64_t entries) {
  if (is_pruning(c)) return 1.0 / static_cast<double>(std::max<std::int64_t>(entries, 1));
  return 0.02;
}

double prune_model(Backbone& model, double target, Index n_min) {
  std::vector<Tensor> tables;
  for (const auto& t : model.embeddings()) {
    const auto* full = dynamic_cast<const FullTable*>(t.get());
    if (!full) throw std::invalid_argument("prune_model: magnitude pruning needs full tables");
    tables.push_back(full->weights());
  }
  Index rows = 0;
  for (const auto& t : model.embeddings()) rows += t->n();
  PruneConfig pc{target, n_min};
  pc.validate(rows, model.embeddings()[0]->d());
  const auto masks = magnitude_masks(tables, pc);
  for (std::size_t k = 0; k < tables.size(); ++k) {
    model.set_embedding(k, CsrTable::from_dense(model.embeddings()[k]->spec(), tables[k], masks[k]));
  }
  return 1.0 - static_cast<double>(model.embedding_params()) / static_cast<double>(model.full_embedding_params());
}

ExperimentConfig with_trial(ExperimentConfig cfg, const tpe::Config& trial) {
  for (const auto& [name, value] : trial) {
    const auto text = std::holds_alternative<double>(value) ? number(std::get<double>(value)) : std::get<std::string>(value);
    apply_setting(cfg, name, text);
  }
  return cfg;
}

tpe::StudyResult tune(const ExperimentConfig& cfg, const Dataset& data, const std::filesystem::path& log_path) {
  tpe::SearchSpace space;
  const bool cf = is_cf(cfg.backbone);
  for (const auto& p : cfg.tune_params) {
    if (p == "lr") space.add_real("lr", cf ? 5e-4 : 1e-5, 1e-2, true);
    else if (p == "l2") space.add_real("l2", 1e-5, 1e-2, true);
    else if (p == "layers") space.add_choice("layers", {"1", "2", "3", "4"});
    else if (p == "gamma") space.add_real("gamma", 0, 1);
    else if (p == "dropout") space.add_real("dropout", 0, 0.9);
    else if (p == "negatives") space.add_choice("negatives", {"1", "2", "3", "4", "5"});
    else throw ConfigError("cannot tune '" + p + "'");
  }
  tpe::StudyOptions opts;
  opts.max_trials = cfg.trials;
  opts.seed = cfg.seed;
  opts.log_path = log_path;
  return tpe::run_study(
      [&](const tpe::Config& c, std::uint64_t seed) {
        auto t = with_trial(cfg, c);
        t.seed = seed;
        t.tuning = false;
        t.profile = false;
        if (cfg.tune_epochs) t.epochs = cfg.tune_epochs;
        t.validate();
        const auto model = train_model(t, data, nullptr);
        return primary_on_valid(t, data, *model);
      },
      space, opts);
}

PipelineResult run_pipeline(const ExperimentConfig& config, const Dataset& data) {
  config.validate();
  ExperimentConfig cfg = config;
  if (cfg.tuning) {
    const auto study = tune(cfg, data, cfg.out.empty() ? std::filesystem::path{} : cfg.out / "tune.csv");
    if (study.best.failed) throw std::runtime_error("every tuning trial failed");
    cfg = with_trial(cfg, study.best.config);
    cfg.tuning = false;
  }

  PipelineResult result;
  auto& r = result.report;
  result.model = train_model(cfg, data, cfg.profile ? &r.profiles : nullptr);
  const auto& model = *result.model;

  auto& m = r.metrics;
  m.task = std::string(task_name(cfg.task));
  m.dataset = data.name;
  m.backbone = std::string(backbone_name(cfg.backbone));
  m.compressor = std::string(compressor_name(cfg.compressor));
  m.target = cfg.compressor == Compressor::None ? 0 : cfg.target;
  m.metrics = evaluate_model(cfg, data, model, true);
  m.params = model.embedding_params();
  m.full_params = model.full_embedding_params();
  m.sparsity = 1.0 - static_cast<double>(m.params) / static_cast<double>(m.full_params);
  m.validate();

  r.primary = cfg.primary_metric();
  r.flagged = std::abs(m.sparsity - m.target) > sparsity_tolerance(cfg.compressor, m.full_params) + 1e-12;
  if (cfg.compressor == Compressor::OptEmbed) r.flagged = m.sparsity < m.target - 1e-12 || m.sparsity > m.target + 0.02;
  if (cfg.baseline) {
    r.baseline = *cfg.baseline;
    r.retain = retain_ratio(m.metric(r.primary), *cfg.baseline);
  }
  if (!cfg.checkpoint.empty()) save_model(model, cfg, cfg.checkpoint);
  if (cfg.profile) {
    for (auto& p : profile_model(cfg, data, *result.model)) r.profiles.push_back(p);
  }
  return result;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  return run_pipeline(cfg, load_dataset(cfg));
}

// ---------------------------------------------------------------------------

void save_model(const Backbone& model, const ExperimentConfig& cfg, const std::filesystem::path& path) {
  Checkpoint ck;
  std::istringstream settings(format_settings(cfg));
  std::string line;
  while (std::getline(settings, line)) {
    const auto eq = line.find('=');
    ck.set("config." + line.substr(0, eq), line.substr(eq + 1));
  }
  model.save(ck, "model");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ck.save(path);
}

LoadedModel load_model(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path);
  LoadedModel out;
  for (const auto& [key, value] : ck.manifest()) {
    if (key.rfind("config.", 0) == 0) apply_setting(out.config, key.substr(7), value);
  }
  out.model = load_backbone(ck, "model");
  return out;
}

std::string format_table(const std::vector<BenchReport>& reports) {
  std::vector<const BenchReport*> rows;
  for (const auto& r : reports) rows.push_back(&r);
  auto method_rank = [](const std::string& name) {
    try {
      return static_cast<int>(parse_compressor(name));
    } catch (const ConfigError&) {
      return 100;
    }
  };
  std::stable_sort(rows.begin(), rows.end(), [&](const BenchReport* a, const BenchReport* b) {
    if (a->metrics.target != b->metrics.target) return a->metrics.target < b->metrics.target;
    return method_rank(a->metrics.compressor) < method_rank(b->metrics.compressor);
  });

  std::vector<std::string> metric_names;
  for (const auto* r : rows)
    for (const auto& [k, v] : r->metrics.metrics)
      if (std::find(metric_names.begin(), metric_names.end(), k) == metric_names.end()) metric_names.push_back(k);

  std::vector<std::string> header{"Sparsity", "Method", "Backbone", "Dataset", "#Para"};
  header.insert(header.end(), metric_names.begin(), metric_names.end());
  header.push_back("Retain");
  std::vector<std::vector<std::string>> cells;
  std::vector<bool> group_start;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& m = rows[i]->metrics;
    char pct[32];
    std::snprintf(pct, sizeof pct, "%g%%", m.target * 100);
    std::vector<std::string> row{pct, m.compressor + (rows[i]->flagged ? "*" : ""), m.backbone, m.dataset,
                                 format_count(m.params)};
    for (const auto& name : metric_names) {
      char buf[32] = "-";
      if (m.has_metric(name)) std::snprintf(buf, sizeof buf, "%.4f", m.metric(name));
      row.push_back(buf);
    }
    char ret[32] = "-";
    if (rows[i]->retain) std::snprintf(ret, sizeof ret, "%.4f", *rows[i]->retain);
    row.push_back(ret);
    cells.push_back(std::move(row));
    group_start.push_back(i > 0 && rows[i - 1]->metrics.target != m.target);
  }

  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& row) {
    std::ostringstream ls;
    for (std::size_t c = 0; c < row.size(); ++c) {
      ls << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << row[c];
    }
    auto text = ls.str();
    text.erase(text.find_last_not_of(' ') + 1);
    os << text << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  os << std::string(total - 2, '-') << '\n';
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (group_start[i]) os << '\n';
    line(cells[i]);
  }
  return os.str();
}

void emit_report(const std::vector<BenchReport>& input, const std::filesystem::path& dir) {
  if (input.empty()) throw std::invalid_argument("emit_report: no reports");
  // Fill missing retain ratios from an uncompressed run of the same setup.
  std::vector<BenchReport> reports = input;
  for (auto& r : reports) {
    if (r.retain) continue;
    for (const auto& b : input) {
      if (b.metrics.compressor == "none" && b.metrics.task == r.metrics.task &&
          b.metrics.dataset == r.metrics.dataset && b.metrics.backbone == r.metrics.backbone &&
          b.metrics.has_metric(r.primary) && r.metrics.has_metric(r.primary) && b.metrics.metric(r.primary) > 0) {
        r.baseline = b.metrics.metric(r.primary);
        r.retain = retain_ratio(r.metrics.metric(r.primary), *r.baseline);
        break;
      }
    }
  }

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };

  auto csv = open("report.csv");
  std::string last_header;
  for (const auto& r : reports) {
    const auto h = r.csv_header();
    if (h != last_header) csv << h << '\n';
    last_header = h;
    csv << r.csv_row() << '\n';
  }

  auto prof = open("profile.csv");
  prof << "task,dataset,backbone,compressor,target,phase,batch_size,ms_per_batch,peak_bytes,repetitions\n";
  for (const auto& r : reports) {
    for (const auto& p : r.profiles) {
      const auto& m = r.metrics;
      prof << m.task << ',' << m.dataset << ',' << m.backbone << ',' << m.compressor << ',' << number(m.target) << ','
           << p.phase << ',' << p.batch_size << ',' << number(p.ms_per_batch) << ',' << p.peak_bytes << ','
           << p.repetitions << '\n';
    }
  }

  auto table = open("table.txt");
  table << format_table(reports);
  if (!csv || !prof || !table) throw std::runtime_error("failed writing reports to " + dir.string());
}

std::vector<BenchReport> read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<BenchReport> out;
  std::vector<std::string> header;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() > 0 && cells[0] == "task") {
      header = cells;
      continue;
    }
    if (header.empty() || cells.size() != header.size() || header.size() < 12) {
      throw DataError(path.string() + ": malformed report row");
    }
    BenchReport r;
    auto& m = r.metrics;
    try {
      m.task = cells[0];
      m.dataset = cells[1];
      m.backbone = cells[2];
      m.compressor = cells[3];
      m.target = parse_number<double>("target", cells[4]);
      m.params = parse_number<std::int64_t>("params", cells[5]);
      m.full_params = parse_number<std::int64_t>("full_params", cells[6]);
      m.sparsity = parse_number<double>("sparsity", cells[7]);
      const std::size_t tail = header.size() - 4;
      for (std::size_t c = 8; c < tail; ++c) m.metrics.emplace_back(header[c], parse_number<double>(header[c], cells[c]));
      r.primary = cells[tail];
      if (!cells[tail + 1].empty()) r.baseline = parse_number<double>("baseline", cells[tail + 1]);
      if (!cells[tail + 2].empty()) r.retain = parse_number<double>("retain", cells[tail + 2]);
      r.flagged = cells[tail + 3] == "1";
    } catch (const ConfigError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lers::bench
