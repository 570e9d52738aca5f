#include "flmkt/rl_allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flmkt/errors.hpp"

namespace flmkt {

namespace {
constexpr double kClip = 5.0;
constexpr double kVarFloor = 1e-8;
}  // namespace

RunningStats::RunningStats(int dim)
    : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}

void RunningStats::update(const Eigen::VectorXd& x) {
  if (x.size() != mean_.size()) throw StructuralError("RunningStats: dimension mismatch");
  ++count_;
  const Eigen::VectorXd delta = x - mean_;
  mean_ += delta / static_cast<double>(count_);
  m2_ += delta.cwiseProduct(x - mean_);
}

Eigen::VectorXd RunningStats::variance() const {
  if (count_ == 0) return Eigen::VectorXd::Ones(mean_.size());
  return m2_ / static_cast<double>(count_);
}

Eigen::VectorXd RunningStats::normalize(const Eigen::VectorXd& x) const {
  if (x.size() != mean_.size()) throw StructuralError("RunningStats: dimension mismatch");
  if (count_ == 0) return x.cwiseMin(kClip).cwiseMax(-kClip);
  const Eigen::VectorXd sd = (variance().array() + kVarFloor).sqrt().matrix();
  Eigen::VectorXd z = (x - mean_).cwiseQuotient(sd);
  return z.cwiseMin(kClip).cwiseMax(-kClip);
}

nlohmann::json RunningStats::to_json() const {
  nlohmann::json j;
  j["count"] = count_;
  j["mean"] = std::vector<double>(mean_.data(), mean_.data() + mean_.size());
  j["m2"] = std::vector<double>(m2_.data(), m2_.data() + m2_.size());
  return j;
}

RunningStats RunningStats::from_json(const nlohmann::json& j) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto m2 = j.at("m2").get<std::vector<double>>();
  if (mean.size() != m2.size()) throw StructuralError("RunningStats: checkpoint size mismatch");
  RunningStats s(static_cast<int>(mean.size()));
  s.count_ = j.at("count").get<long long>();
  for (std::size_t i = 0; i < mean.size(); ++i) {
    s.mean_(static_cast<Eigen::Index>(i)) = mean[i];
    s.m2_(static_cast<Eigen::Index>(i)) = m2[i];
  }
  return s;
}

int state_block_dim(int n_clients, int repr_dim) { return n_clients * (1 + repr_dim); }

MarketState build_state(const Eigen::VectorXd& perfs, const Eigen::MatrixXd& reprs,
                        const std::vector<ClientId>& sellers, RunningStats& stats,
                        bool update_stats) {
  const int n = static_cast<int>(perfs.size());
  if (reprs.rows() != n)
    throw StructuralError("build_state: representation rows do not match client count");
  const int d = static_cast<int>(reprs.cols());
  const int block = state_block_dim(n, d);
  if (stats.dim() != block) throw StructuralError("build_state: stats dimension mismatch");

  MarketState state;
  state.sellers = sellers;
  std::sort(state.sellers.begin(), state.sellers.end());
  state.block_dim = block;

  std::vector<Eigen::VectorXd> raw;
  for (ClientId s : state.sellers) {
    if (s < 0 || s >= n)
      throw StructuralError("build_state: missing client data for seller " + std::to_string(s));
    Eigen::VectorXd v(block);
    Eigen::Index at = 0;
    v(at++) = perfs(s);
    v.segment(at, d) = reprs.row(s).transpose();
    at += d;
    for (int i = 0; i < n; ++i) {
      if (i == s) continue;
      v(at++) = perfs(i);
    }
    for (int i = 0; i < n; ++i) {
      if (i == s) continue;
      v.segment(at, d) = reprs.row(i).transpose();
      at += d;
    }
    raw.push_back(std::move(v));
  }
  if (update_stats)
    for (const auto& v : raw) stats.update(v);
  for (const auto& v : raw) state.blocks.push_back(stats.normalize(v));
  return state;
}

Eigen::MatrixXd allocation_scores(const Eigen::MatrixXd& bids, const Eigen::MatrixXd& pi,
                                  const std::vector<ClientId>& sellers) {
  if (bids.rows() != pi.rows() || bids.cols() != pi.cols())
    throw StructuralError("allocation_scores: bid/pi shape mismatch");
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(bids.rows(), bids.cols());
  for (ClientId s : sellers) {
    const double total = pi.col(s).sum();
    if (total != 0.0 && std::abs(total - 1.0) > 1e-6)
      throw StructuralError("allocation_scores: pi column " + std::to_string(s) +
                            " is not a distribution");
    scores.col(s) = bids.col(s).cwiseProduct(pi.col(s));
  }
  return scores;
}

double shaped_reward(const Eigen::VectorXd& revenues, double threshold) {
  if (!revenues.allFinite()) throw TrainingError("shaped_reward: non-finite revenues");
  if ((revenues.array() < 0.0).any())
    throw StructuralError("shaped_reward: negative revenue");
  double r = 0.0;
  for (Eigen::Index i = 0; i < revenues.size(); ++i)
    r += revenues(i) - std::max(0.0, threshold - revenues(i));
  return r;
}

void RlAllocatorConfig::validate() const {
  if (n_clients < 2) throw ConfigError("rl allocator: need at least 2 clients");
  if (repr_dim < 1) throw ConfigError("rl allocator: repr_dim must be positive");
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("rl allocator: negative learning rate");
  if (hidden.empty()) throw ConfigError("rl allocator: need at least one hidden layer");
  for (int h : hidden)
    if (h < 1) throw ConfigError("rl allocator: non-positive hidden width");
}

namespace {

std::vector<int> scaled_hidden(const std::vector<int>& hidden, int block_dim) {
  const double scale = std::min(1.0, static_cast<double>(block_dim) / 1024.0);
  std::vector<int> out;
  for (int h : hidden) out.push_back(std::max(8, static_cast<int>(std::lround(h * scale))));
  return out;
}

}  // namespace

RlAllocator::RlAllocator(const RlAllocatorConfig& config)
    : config_(config), stats_(state_block_dim(config.n_clients, config.repr_dim)) {
  config_.validate();
  const int block = state_block_dim(config_.n_clients, config_.repr_dim);
  const auto h = scaled_hidden(config_.hidden, block);

  std::vector<int> policy_dims{block};
  policy_dims.insert(policy_dims.end(), h.begin(), h.end());
  policy_dims.push_back(config_.n_clients);

  auto eng = rng::child(config_.init_seed, {static_cast<std::uint64_t>(rng::Stream::kNetInit)});
  policy_ = net::make_net<double>(policy_dims, net::Head::kLinear, eng);
  value_encoder_ = net::make_net<double>({block, h.front()}, net::Head::kLinear, eng);
  std::vector<int> trunk_dims{h.front()};
  for (std::size_t i = 1; i < h.size(); ++i) trunk_dims.push_back(h[i]);
  trunk_dims.push_back(1);
  value_trunk_ = net::make_net<double>(trunk_dims, net::Head::kLinear, eng);
}

MarketState RlAllocator::observe(const Eigen::VectorXd& perfs, const Eigen::MatrixXd& reprs,
                                 const std::vector<ClientId>& sellers) {
  return build_state(perfs, reprs, sellers, stats_, !frozen_);
}

MarketState RlAllocator::peek(const Eigen::VectorXd& perfs, const Eigen::MatrixXd& reprs,
                              const std::vector<ClientId>& sellers) const {
  auto& stats = const_cast<RunningStats&>(stats_);
  return build_state(perfs, reprs, sellers, stats, false);
}

RlAllocator::Decision RlAllocator::decide(const MarketState& state, const Eigen::MatrixXd& bids,
                                          int copies_k) const {
  const int n = config_.n_clients;
  if (bids.rows() != n || bids.cols() != n)
    throw StructuralError("decide: bid matrix shape mismatch");
  if (static_cast<int>(state.blocks.size()) != static_cast<int>(state.sellers.size()))
    throw StructuralError("decide: state block count mismatch");

  Decision d;
  d.pi = Eigen::MatrixXd::Zero(n, n);
  d.winners = BoolMatrix::Constant(n, n, false);
  d.winners_by_buyer.assign(static_cast<std::size_t>(n), {});

  for (std::size_t s_at = 0; s_at < state.sellers.size(); ++s_at) {
    const ClientId s = state.sellers[s_at];
    net::TapeD tape;
    const Eigen::VectorXd logits = net::forward(policy_, state.blocks[s_at], &tape);
    if (!logits.allFinite()) throw TrainingError("decide: non-finite policy logits");

    std::vector<int> eligible;
    for (int i = 0; i < n; ++i)
      if (i != s && bids(i, s) > 0.0) eligible.push_back(i);

    Eigen::VectorXd pi_col = Eigen::VectorXd::Zero(n);
    if (!eligible.empty()) {
      Eigen::VectorXd sub(eligible.size());
      for (std::size_t e = 0; e < eligible.size(); ++e) sub(e) = logits(eligible[e]);
      const Eigen::VectorXd probs = net::softmax(sub);
      for (std::size_t e = 0; e < eligible.size(); ++e) pi_col(eligible[e]) = probs(e);
    }
    d.pi.col(s) = pi_col;
    d.tapes.push_back(std::move(tape));
    d.pis.push_back(pi_col);
  }

  d.scores = allocation_scores(bids, d.pi, state.sellers);
  for (ClientId s : state.sellers) {
    SellerRanking ranking = rank_bidders(s, bids.col(s), d.scores.col(s));
    const auto winners = select_winners(ranking, copies_k);
    for (const auto& w : winners) {
      d.winners(w.buyer, s) = true;
      d.winners_by_buyer[static_cast<std::size_t>(w.buyer)].push_back(s);
    }
    d.rankings.push_back(std::move(ranking));
  }
  return d;
}

RlAllocator::ValueEval RlAllocator::value_eval(const MarketState& state) const {
  if (state.blocks.empty()) throw StructuralError("value: empty state");
  ValueEval ev;
  Eigen::VectorXd pooled = Eigen::VectorXd::Zero(value_encoder_.out_dim());
  for (const auto& block : state.blocks) {
    net::TapeD tape;
    pooled += net::forward(value_encoder_, block, &tape);
    ev.enc_tapes.push_back(std::move(tape));
  }
  pooled /= static_cast<double>(state.blocks.size());
  ev.pooled = pooled;
  const Eigen::VectorXd out =
      net::forward(value_trunk_, pooled.cwiseMax(0.0).eval(), &ev.trunk_tape);
  ev.v = out(0);
  if (!std::isfinite(ev.v)) throw TrainingError("value: non-finite estimate");
  return ev;
}

double RlAllocator::value(const MarketState& state) const { return value_eval(state).v; }

TdStep RlAllocator::td(double reward, const MarketState& s_now, const MarketState& s_next,
                       bool terminal) const {
  if (!std::isfinite(reward)) throw TrainingError("td: non-finite reward");
  TdStep step;
  step.reward = reward;
  step.v_now = value(s_now);
  step.v_next = terminal ? 0.0 : value(s_next);
  step.td_target = reward + step.v_next;
  step.td_error = step.v_now - step.td_target;
  return step;
}

void RlAllocator::update(const TdStep& td, const MarketState& s_now, const Decision& decision) {
  if (frozen_) return;
  if (!std::isfinite(td.td_error)) throw TrainingError("update: non-finite TD error");

  // Critic: gradient of v(s_now), scaled by the TD error.
  ValueEval ev = value_eval(s_now);
  auto trunk_grads = net::backward(value_trunk_, ev.trunk_tape,
                                   Eigen::VectorXd::Ones(1));
  const Eigen::VectorXd d_pooled =
      (ev.pooled.array() > 0.0).cast<double>().matrix().cwiseProduct(trunk_grads.d_input);
  auto enc_grads = net::zero_gradients(value_encoder_);
  const double inv_m = 1.0 / static_cast<double>(s_now.blocks.size());
  for (const auto& tape : ev.enc_tapes)
    net::accumulate(enc_grads, net::backward(value_encoder_, tape, (inv_m * d_pooled).eval()));

  // Actor: gradient of the winners' summed log-probabilities.
  auto policy_grads = net::zero_gradients(policy_);
  for (std::size_t s_at = 0; s_at < s_now.sellers.size(); ++s_at) {
    const ClientId s = s_now.sellers[s_at];
    const Eigen::VectorXd& pi = decision.pis[s_at];
    Eigen::VectorXd dz = Eigen::VectorXd::Zero(config_.n_clients);
    int n_winners = 0;
    for (int i = 0; i < config_.n_clients; ++i) {
      if (!decision.winners(i, s)) continue;
      if (pi(i) <= 0.0) throw StructuralError("update: winner with zero policy probability");
      dz(i) += 1.0;
      ++n_winners;
    }
    if (n_winners == 0) continue;
    for (int i = 0; i < config_.n_clients; ++i)
      if (pi(i) > 0.0) dz(i) -= n_winners * pi(i);
    net::accumulate(policy_grads, net::backward(policy_, decision.tapes[s_at], dz));
  }

  if (!policy_grads.all_finite() || !trunk_grads.all_finite() || !enc_grads.all_finite())
    throw TrainingError("update: non-finite gradients, td_error " + std::to_string(td.td_error) +
                        ", policy grad norm " + std::to_string(policy_grads.squared_norm()));

  auto scaled_policy = net::zero_gradients(policy_);
  net::accumulate(scaled_policy, policy_grads, td.td_error);
  net::sgd_step(policy_, scaled_policy, config_.beta);

  auto scaled_trunk = net::zero_gradients(value_trunk_);
  net::accumulate(scaled_trunk, trunk_grads, td.td_error);
  net::sgd_step(value_trunk_, scaled_trunk, config_.alpha);

  auto scaled_enc = net::zero_gradients(value_encoder_);
  net::accumulate(scaled_enc, enc_grads, td.td_error);
  net::sgd_step(value_encoder_, scaled_enc, config_.alpha);
}

nlohmann::json RlAllocator::checkpoint() const {
  nlohmann::json j;
  j["n_clients"] = config_.n_clients;
  j["repr_dim"] = config_.repr_dim;
  j["policy"] = net::net_to_json(policy_);
  j["value_encoder"] = net::net_to_json(value_encoder_);
  j["value_trunk"] = net::net_to_json(value_trunk_);
  j["stats"] = stats_.to_json();
  return j;
}

void RlAllocator::restore(const nlohmann::json& j) {
  if (j.at("n_clients").get<int>() != config_.n_clients ||
      j.at("repr_dim").get<int>() != config_.repr_dim)
    throw StructuralError("restore: checkpoint shape does not match configuration");
  policy_ = net::net_from_json<double>(j.at("policy"));
  value_encoder_ = net::net_from_json<double>(j.at("value_encoder"));
  value_trunk_ = net::net_from_json<double>(j.at("value_trunk"));
  stats_ = RunningStats::from_json(j.at("stats"));
}

}  // namespace flmkt
