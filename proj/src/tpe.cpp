// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/tpe.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace lers::tpe {
namespace {

constexpr double kMinBandwidth = 0.01;  // fraction of the range

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double to_unit(const ParamSpec& p, double x) { return p.log_scale ? std::log(x) : x; }
double from_unit(const ParamSpec& p, double t) { return p.log_scale ? std::exp(t) : t; }

std::string number_text(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_number(const std::string& text, const std::string& what) {
  double v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw std::invalid_argument(what + ": '" + text + "' is not a number");
  }
  return v;
}

bool bad_token(const std::string& s) { return s.empty() || s.find_first_of(";=,\n") != std::string::npos; }

}  // namespace

SearchSpace& SearchSpace::add_real(std::string name, double lo, double hi, bool log_scale) {
  if (bad_token(name)) throw std::invalid_argument("search space: bad parameter name '" + name + "'");
  if (!(lo < hi)) throw std::invalid_argument("search space: '" + name + "' needs lo < hi");
  if (log_scale && !(lo > 0)) throw std::invalid_argument("search space: log-scaled '" + name + "' needs lo > 0");
  params_.push_back({std::move(name), ParamSpec::Kind::Continuous, lo, hi, log_scale, {}});
  return *this;
}

SearchSpace& SearchSpace::add_choice(std::string name, std::vector<std::string> choices) {
  if (bad_token(name)) throw std::invalid_argument("search space: bad parameter name '" + name + "'");
  if (choices.empty()) throw std::invalid_argument("search space: '" + name + "' has no choices");
  for (const auto& c : choices) {
    if (bad_token(c)) throw std::invalid_argument("search space: bad choice '" + c + "' for '" + name + "'");
  }
  params_.push_back({std::move(name), ParamSpec::Kind::Categorical, 0, 0, false, std::move(choices)});
  return *this;
}

const ParamSpec& SearchSpace::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("search space has no parameter '" + name + "'");
}

bool SearchSpace::contains(const Config& config) const {
  if (config.size() != params_.size()) return false;
  for (const auto& p : params_) {
    auto it = config.find(p.name);
    if (it == config.end()) return false;
    if (p.kind == ParamSpec::Kind::Continuous) {
      const double* x = std::get_if<double>(&it->second);
      if (!x || !(*x >= p.lo && *x <= p.hi)) return false;
    } else {
      const std::string* c = std::get_if<std::string>(&it->second);
      if (!c || std::find(p.choices.begin(), p.choices.end(), *c) == p.choices.end()) return false;
    }
  }
  return true;
}

double real_of(const Config& config, const std::string& name) {
  auto it = config.find(name);
  if (it == config.end() || !std::holds_alternative<double>(it->second)) {
    throw std::out_of_range("config has no real parameter '" + name + "'");
  }
  return std::get<double>(it->second);
}

const std::string& choice_of(const Config& config, const std::string& name) {
  auto it = config.find(name);
  if (it == config.end() || !std::holds_alternative<std::string>(it->second)) {
    throw std::out_of_range("config has no categorical parameter '" + name + "'");
  }
  return std::get<std::string>(it->second);
}

std::string format_config(const Config& config) {
  std::string out;
  for (const auto& [name, value] : config) {
    if (!out.empty()) out += ';';
    out += name + '=';
    out += std::holds_alternative<double>(value) ? number_text(std::get<double>(value)) : std::get<std::string>(value);
  }
  return out;
}

Config parse_config(const SearchSpace& space, const std::string& text) {
  Config config;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ';');) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config entry '" + item + "' lacks '='");
    const std::string name = item.substr(0, eq), value = item.substr(eq + 1);
    const auto& p = space.param(name);
    if (p.kind == ParamSpec::Kind::Continuous) {
      config[name] = parse_number(value, name);
    } else {
      config[name] = value;
    }
  }
  if (!space.contains(config)) throw std::invalid_argument("config '" + text + "' lies outside the search space");
  return config;
}

// ---------------------------------------------------------------------------

Split split_history(const History& history, double gamma, ThresholdRule rule) {
  Split s;
  if (history.empty()) return s;
  if (!(gamma > 0 && gamma < 1)) throw std::invalid_argument("split_history: gamma must lie in (0, 1)");
  // Best first; earlier trials win ties.
  std::vector<std::size_t> order(history.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return history[a].y > history[b].y; });

  const double top = history[order[0]].y;
  const bool all_equal = std::all_of(history.begin(), history.end(), [&](const Trial& t) { return t.y == top; });
  if (rule == ThresholdRule::BestSingle || all_equal || history.size() == 1) {
    s.good = {order[0]};
    s.bad.assign(order.begin() + 1, order.end());
    std::sort(s.bad.begin(), s.bad.end());
    return s;
  }
  const auto k = std::min<std::size_t>(history.size() - 1,
                                       std::max<std::size_t>(1, static_cast<std::size_t>(
                                                                    std::ceil(gamma * static_cast<double>(history.size())))));
  double threshold = history[order[k]].y;
  // Nudge: if the cut falls inside a block of maxima, keep just that block.
  if (threshold == top) {
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (history[order[i]].y < top) {
        threshold = history[order[i]].y;
        break;
      }
    }
  }
  for (std::size_t i = 0; i < history.size(); ++i) (history[i].y > threshold ? s.good : s.bad).push_back(i);
  return s;
}

// ---------------------------------------------------------------------------

ParzenDensity::ParzenDensity(const ParamSpec& spec, std::vector<ParamValue> samples) : spec_(spec) {
  if (spec.kind == ParamSpec::Kind::Categorical) {
    std::vector<double> counts(spec.choices.size(), 1);  // add-one
    for (const auto& s : samples) {
      const auto& c = std::get<std::string>(s);
      auto it = std::find(spec.choices.begin(), spec.choices.end(), c);
      if (it == spec.choices.end()) throw std::invalid_argument("parzen: unknown choice '" + c + "'");
      counts[static_cast<std::size_t>(it - spec.choices.begin())] += 1;
    }
    const double total = static_cast<double>(samples.size() + spec.choices.size());
    for (double c : counts) category_p_.push_back(c / total);
    return;
  }
  a_ = to_unit(spec, spec.lo);
  b_ = to_unit(spec, spec.hi);
  const double range = b_ - a_;
  std::vector<double> xs;
  for (const auto& s : samples) {
    const double x = std::get<double>(s);
    if (!(x >= spec.lo && x <= spec.hi)) throw std::invalid_argument("parzen: sample outside the bounds of " + spec.name);
    xs.push_back(to_unit(spec, x));
  }
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  for (double x : xs) {
    // Distance to the nearest other sample.
    double nn = range;
    auto it = std::lower_bound(sorted.begin(), sorted.end(), x);
    const auto pos = static_cast<std::size_t>(it - sorted.begin());
    if (pos > 0) nn = std::min(nn, x - sorted[pos - 1]);
    if (pos + 1 < sorted.size()) nn = std::min(nn, sorted[pos + 1] - x);
    mu_.push_back(x);
    sigma_.push_back(std::clamp(nn, kMinBandwidth * range, range));
  }
  mu_.push_back(0.5 * (a_ + b_));
  sigma_.push_back(range);
  for (std::size_t i = 0; i < mu_.size(); ++i) {
    mass_.push_back(normal_cdf((b_ - mu_[i]) / sigma_[i]) - normal_cdf((a_ - mu_[i]) / sigma_[i]));
  }
}

double ParzenDensity::pdf_transformed(double t) const {
  if (spec_.kind != ParamSpec::Kind::Continuous) throw std::logic_error("pdf_transformed on a categorical dimension");
  if (t < a_ || t > b_) return 0;
  double total = 0;
  for (std::size_t i = 0; i < mu_.size(); ++i) {
    const double z = (t - mu_[i]) / sigma_[i];
    total += std::exp(-0.5 * z * z) / (sigma_[i] * std::sqrt(2 * std::numbers::pi) * mass_[i]);
  }
  return total / static_cast<double>(mu_.size());
}

double ParzenDensity::pdf(const ParamValue& value) const {
  if (spec_.kind == ParamSpec::Kind::Categorical) {
    const auto& c = std::get<std::string>(value);
    auto it = std::find(spec_.choices.begin(), spec_.choices.end(), c);
    return it == spec_.choices.end() ? 0 : category_p_[static_cast<std::size_t>(it - spec_.choices.begin())];
  }
  return pdf_transformed(to_unit(spec_, std::get<double>(value)));
}

ParamValue ParzenDensity::sample(std::mt19937_64& rng) const {
  if (spec_.kind == ParamSpec::Kind::Categorical) {
    std::discrete_distribution<std::size_t> pick(category_p_.begin(), category_p_.end());
    return spec_.choices[pick(rng)];
  }
  const std::size_t i = std::uniform_int_distribution<std::size_t>(0, mu_.size() - 1)(rng);
  std::normal_distribution<double> g(mu_[i], sigma_[i]);
  // Every component keeps at least a third of its mass inside the bounds.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double t = g(rng);
    if (t >= a_ && t <= b_) return std::clamp(from_unit(spec_, t), spec_.lo, spec_.hi);
  }
  return std::clamp(from_unit(spec_, mu_[i]), spec_.lo, spec_.hi);
}

// ---------------------------------------------------------------------------

Config sample_prior(const SearchSpace& space, std::mt19937_64& rng) {
  Config config;
  for (const auto& p : space.params()) {
    if (p.kind == ParamSpec::Kind::Categorical) {
      config[p.name] = p.choices[std::uniform_int_distribution<std::size_t>(0, p.choices.size() - 1)(rng)];
    } else {
      const double t = std::uniform_real_distribution<double>(to_unit(p, p.lo), to_unit(p, p.hi))(rng);
      config[p.name] = std::clamp(from_unit(p, t), p.lo, p.hi);
    }
  }
  return config;
}

Config suggest(const SearchSpace& space, const History& history, const SuggestOptions& opts, std::mt19937_64& rng) {
  if (history.size() < opts.omega || history.empty()) return sample_prior(space, rng);
  if (opts.candidates == 0) throw std::invalid_argument("suggest: need at least one candidate");
  const Split split = split_history(history, opts.gamma, opts.rule);
  Config out;
  for (const auto& p : space.params()) {
    std::vector<ParamValue> good, bad;
    for (auto i : split.good) good.push_back(history[i].config.at(p.name));
    for (auto i : split.bad) bad.push_back(history[i].config.at(p.name));
    const ParzenDensity l(p, std::move(good)), g(p, std::move(bad));
    ParamValue best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < opts.candidates; ++c) {
      ParamValue x = l.sample(rng);
      const double score = std::log(l.pdf(x)) - std::log(g.pdf(x));
      if (score > best_score) {
        best_score = score;
        best = std::move(x);
      }
    }
    out[p.name] = std::move(best);
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_log_header(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write study log " + path.string());
  f << "trial,config,metric,seconds\n";
}

void append_log(const std::filesystem::path& path, const Trial& trial) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot append to study log " + path.string());
  f << trial.index << ',' << format_config(trial.config) << ',' << (trial.failed ? "failed" : number_text(trial.y))
    << ',' << number_text(trial.seconds) << '\n';
}

History read_log(const std::filesystem::path& path, const SearchSpace& space) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read study log " + path.string());
  History h;
  std::string line;
  std::getline(f, line);
  if (line != "trial,config,metric,seconds") throw std::runtime_error(path.string() + ": not a study log");
  for (std::size_t lineno = 2; std::getline(f, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() != 4) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
    Trial t;
    t.index = static_cast<std::size_t>(parse_number(cols[0], "trial"));
    if (t.index != h.size()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": trial out of order");
    t.config = parse_config(space, cols[1]);
    t.failed = cols[2] == "failed";
    t.y = t.failed ? kFailed : parse_number(cols[2], "metric");
    t.seconds = parse_number(cols[3], "seconds");
    h.push_back(std::move(t));
  }
  return h;
}

StudyResult run_study(const Objective& objective, const SearchSpace& space, const StudyOptions& opts) {
  if (space.empty()) throw std::invalid_argument("run_study: empty search space");
  StudyResult result;
  const bool logging = !opts.log_path.empty();
  if (logging) {
    if (std::filesystem::exists(opts.log_path)) {
      result.history = read_log(opts.log_path, space);
    } else {
      write_log_header(opts.log_path);
    }
  }
  while (result.history.size() < opts.max_trials) {
    const std::size_t index = result.history.size();
    std::seed_seq seq{static_cast<std::uint32_t>(opts.seed), static_cast<std::uint32_t>(opts.seed >> 32),
                      static_cast<std::uint32_t>(index), 0x7e5u};
    std::mt19937_64 rng(seq);
    Trial t;
    t.index = index;
    t.config = suggest(space, result.history, opts.suggest, rng);
    const auto start = std::chrono::steady_clock::now();
    try {
      t.y = objective(t.config, rng());
      if (!std::isfinite(t.y)) throw std::runtime_error("non-finite metric");
    } catch (const std::exception&) {
      t.y = kFailed;
      t.failed = true;
    }
    t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ++result.evaluations;
    if (logging) append_log(opts.log_path, t);
    result.history.push_back(std::move(t));
  }
  if (result.history.empty()) throw std::invalid_argument("run_study: max_trials must be positive");
  result.best = result.history[split_history(result.history, 0.25, ThresholdRule::BestSingle).good.front()];
  return result;
}

}  // namespace lers::tpe
