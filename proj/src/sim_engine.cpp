#include "flmkt/sim_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>

#include "flmkt/errors.hpp"
#include "flmkt/rng.hpp"

namespace flmkt {

double fairness_threshold(const Eigen::VectorXd& revenues, double eta) {
  if (revenues.size() == 0) return 0.0;
  return eta * std::max(revenues.maxCoeff(), 0.0);
}

namespace {

double bottom_decile_mean(const Eigen::VectorXd& values) {
  if (values.size() == 0) return 0.0;
  std::vector<double> v(values.data(), values.data() + values.size());
  std::sort(v.begin(), v.end());
  const std::size_t take = (v.size() + 9) / 10;
  double sum = 0.0;
  for (std::size_t i = 0; i < take; ++i) sum += v[i];
  return sum / static_cast<double>(take);
}

double draw_utility_cap(UtilityDistribution dist, rng::Engine& eng) {
  for (;;) {
    const double u = dist == UtilityDistribution::kUniform01 ? rng::uniform01(eng)
                                                             : std::abs(rng::normal(eng));
    if (u > 0.0) return u;
  }
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void MetricsReport::finalize() {
  cumulative_volume = 0.0;
  for (const auto& r : rounds) cumulative_volume += r.volume;
  final_mean_accuracy = client_accuracy.size() > 0 ? client_accuracy.mean() : 0.0;
  bottom_decile_accuracy = bottom_decile_mean(client_accuracy);
  bottom_decile_revenue = bottom_decile_mean(client_revenue);
}

MarketEnv::MarketEnv(const SimConfig& config, std::uint64_t world_seed, std::uint64_t env_seed,
                     int total_rounds, bool training, std::shared_ptr<RlAllocator> allocator,
                     std::shared_ptr<const Dataset> dataset)
    : config_(config),
      env_seed_(env_seed),
      total_rounds_(total_rounds),
      training_(training),
      allocator_(std::move(allocator)) {
  config_.validate();
  if (config_.allocator == AllocatorKind::kRl && !allocator_)
    throw StructuralError("MarketEnv: RL allocator requested but none supplied");
  mech_ = MechanismParams{config_.n_clients, config_.copies_k, config_.seller_ratio, env_seed_};
  mech_.validate();

  if (config_.learner == LearnerKind::kSynthetic) {
    learners_ = make_synthetic_population(config_.synthetic, config_.n_clients, config_.repr_dim,
                                          world_seed, env_seed_);
  } else {
    if (!dataset) throw StructuralError("MarketEnv: real_mlp learner needs a dataset");
    auto pop = make_mlp_population(config_.mlp, std::move(dataset), config_.n_clients,
                                   config_.dirichlet_alpha, config_.repr_dim, world_seed,
                                   env_seed_);
    learners_ = std::move(pop.learners);
    partition_ = std::move(pop.partition);
  }

  records_.resize(static_cast<std::size_t>(config_.n_clients));
  baselines_ = isolated_pretrain(learners_, config_.pretrain_epochs, records_);
  perfs_ = baselines_;
  reprs_ = collect_reprs(learners_);

  auto cap_eng = rng::child(world_seed, {static_cast<std::uint64_t>(rng::Stream::kUtility)});
  const int exploration_rounds =
      static_cast<int>(std::lround(config_.exploration_fraction * total_rounds_));
  for (int i = 0; i < config_.n_clients; ++i) {
    const double cap = draw_utility_cap(config_.utility_distribution, cap_eng);
    profiles_.emplace_back(i, cap, config_.n_clients, config_.strategy, config_.epsilon,
                           exploration_rounds);
  }
  accounts_.resize(static_cast<std::size_t>(config_.n_clients));
}

void MarketEnv::allocate_rl(int round, RoundResult& out, const std::vector<ClientId>& authorized,
                            MarketState& state, RlAllocator::Decision& decision) {
  (void)round;
  state = allocator_->observe(perfs_, reprs_, authorized);
  decision = allocator_->decide(state, out.ledger.bids, config_.copies_k);
  out.ledger.scores = decision.scores;
  out.ledger.winners = decision.winners;
}

void MarketEnv::allocate_gsp(RoundResult& out, const std::vector<ClientId>& authorized) {
  // Scores mirror the bids: GSP ranks by price alone.
  out.ledger.scores = out.ledger.bids;
  for (ClientId s : authorized) {
    std::vector<std::pair<ClientId, double>> offers;
    for (int i = 0; i < config_.n_clients; ++i) {
      if (i == s) continue;
      if (out.ledger.bids(i, s) > 0.0) offers.emplace_back(i, out.ledger.bids(i, s));
    }
    for (const auto& award : gsp_allocate(offers, config_.copies_k)) {
      out.ledger.winners(award.buyer, s) = true;
      out.ledger.unit_prices(award.buyer, s) = award.unit_price;
    }
  }
}

void MarketEnv::allocate_random(int round, RoundResult& out,
                                const std::vector<ClientId>& authorized,
                                std::vector<SellerRanking>& rankings) {
  auto eng = rng::child(env_seed_, {static_cast<std::uint64_t>(rng::Stream::kRandomAlloc),
                                    static_cast<std::uint64_t>(round)});
  for (ClientId s : authorized) {
    for (int i = 0; i < config_.n_clients; ++i) {
      if (i == s || out.ledger.bids(i, s) <= 0.0) continue;
      out.ledger.scores(i, s) = rng::uniform01(eng);
    }
  }
  for (ClientId s : authorized) {
    SellerRanking ranking = rank_bidders(s, out.ledger.bids.col(s), out.ledger.scores.col(s));
    for (const auto& w : select_winners(ranking, config_.copies_k))
      out.ledger.winners(w.buyer, s) = true;
    rankings.push_back(std::move(ranking));
  }
}

MarketEnv::RoundResult MarketEnv::run_round(int round) {
  const int n = config_.n_clients;
  RoundResult out;
  out.ledger = RoundLedger(n, round);

  const auto authorized = authorize_sellers(mech_, round);
  out.ledger.authorized_sellers = authorized;

  for (int i = 0; i < n; ++i) {
    auto eng = rng::child(env_seed_, {static_cast<std::uint64_t>(rng::Stream::kBids),
                                      static_cast<std::uint64_t>(round),
                                      static_cast<std::uint64_t>(i)});
    out.ledger.bids.row(i) =
        make_bid(profiles_[static_cast<std::size_t>(i)], authorized, round, eng).transpose();
  }

  MarketState state;
  RlAllocator::Decision decision;
  std::vector<SellerRanking> rankings;
  switch (config_.allocator) {
    case AllocatorKind::kRl:
      allocate_rl(round, out, authorized, state, decision);
      rankings = decision.rankings;
      break;
    case AllocatorKind::kGsp:
      allocate_gsp(out, authorized);
      break;
    case AllocatorKind::kRandom:
      allocate_random(round, out, authorized, rankings);
      break;
  }

  std::vector<std::vector<ClientId>> winners_by_buyer(static_cast<std::size_t>(n));
  for (std::size_t s_at = 0; s_at < authorized.size(); ++s_at) {
    const ClientId s = authorized[s_at];
    for (int i = 0; i < n; ++i)
      if (out.ledger.winners(i, s)) winners_by_buyer[static_cast<std::size_t>(i)].push_back(s);
  }

  const auto env = env_step(winners_by_buyer, authorized, learners_, records_);
  perfs_ = env.perfs;
  reprs_ = env.reprs;
  out.deltas = env.deltas;

  if (config_.allocator != AllocatorKind::kGsp) {
    for (std::size_t s_at = 0; s_at < authorized.size(); ++s_at) {
      const ClientId s = authorized[s_at];
      for (const auto& award : critical_bid_payment(rankings[s_at], config_.copies_k, out.deltas))
        out.ledger.unit_prices(award.buyer, s) = award.unit_price;
    }
  }

  out.revenues = settle_round(out.ledger, out.deltas);
  for (int j = 0; j < n; ++j) accounts_[static_cast<std::size_t>(j)].credit(out.revenues(j));
  for (int i = 0; i < n; ++i)
    record_outcome(profiles_[static_cast<std::size_t>(i)],
                   winners_by_buyer[static_cast<std::size_t>(i)], out.deltas(i));

  out.threshold = fairness_threshold(out.revenues, config_.eta);
  out.reward = shaped_reward(out.revenues, out.threshold);

  if (config_.allocator == AllocatorKind::kRl && training_ && !allocator_->frozen()) {
    const MarketState next = allocator_->peek(perfs_, reprs_, authorized);
    out.td = allocator_->td(out.reward, state, next, round + 1 >= total_rounds_);
    try {
      allocator_->update(out.td, state, decision);
    } catch (const TrainingError& e) {
      throw TrainingError("round " + std::to_string(round) + ": " + e.what());
    }
    out.td_valid = true;
  }
  return out;
}

namespace {

void run_phase(MarketEnv& env, int rounds, MetricsReport& report,
               std::vector<std::string>& ledger_lines) {
  Eigen::VectorXd cumulative = Eigen::VectorXd::Zero(env.n_clients());
  for (int t = 0; t < rounds; ++t) {
    const auto rr = env.run_round(t);
    cumulative += rr.revenues;
    report.rounds.push_back({t, rr.ledger.transfers.sum(), env.perfs().mean(), rr.reward,
                             rr.td_valid ? rr.td.td_error : 0.0});
    ledger_lines.push_back(ledger_to_json(rr.ledger, rr.deltas, rr.revenues).dump());
  }
  report.client_revenue = cumulative;
  report.client_accuracy = env.perfs();
  report.finalize();
}

}  // namespace

ExperimentOutput run_experiment(const SimConfig& config) {
  config.validate();
  ExperimentOutput out;
  out.resolved_config = config.to_json();
  const auto world_seed =
      rng::derive(config.seeds.train, {static_cast<std::uint64_t>(rng::Stream::kWorld)});

  std::shared_ptr<const Dataset> dataset;
  if (config.learner == LearnerKind::kRealMlp) {
    dataset = std::make_shared<const Dataset>(
        !config.dataset.csv.empty() ? load_csv(config.dataset.csv)
                                    : load_idx(config.dataset.images, config.dataset.labels));
  }

  std::shared_ptr<RlAllocator> allocator;
  if (config.allocator == AllocatorKind::kRl) {
    RlAllocatorConfig rc;
    rc.n_clients = config.n_clients;
    rc.repr_dim = config.repr_dim;
    rc.alpha = config.alpha;
    rc.beta = config.beta;
    rc.init_seed =
        rng::derive(config.seeds.train, {static_cast<std::uint64_t>(rng::Stream::kNetInit)});
    allocator = std::make_shared<RlAllocator>(rc);

    if (config.train_rounds > 0) {
      MarketEnv train_env(config, world_seed, config.seeds.train, config.train_rounds, true,
                          allocator, dataset);
      run_phase(train_env, config.train_rounds, out.train_metrics, out.train_ledger);
    }
    allocator->freeze();
    out.allocator_checkpoint = allocator->checkpoint();
  }

  MarketEnv test_env(config, world_seed, config.seeds.test, config.test_rounds, false, allocator,
                     dataset);
  if (test_env.partition()) out.partition = partition_to_json(*test_env.partition());
  run_phase(test_env, config.test_rounds, out.test_metrics, out.test_ledger);
  return out;
}

std::string metrics_to_csv(const MetricsReport& report) {
  std::ostringstream oss;
  oss << "round,volume,mean_accuracy,reward,td_error\n";
  for (const auto& r : report.rounds) {
    oss << r.round << ',' << fmt_double(r.volume) << ',' << fmt_double(r.mean_accuracy) << ','
        << fmt_double(r.reward) << ',' << fmt_double(r.td_error) << '\n';
  }
  return oss.str();
}

namespace {

nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["cumulative_volume"] = report.cumulative_volume;
  j["final_mean_accuracy"] = report.final_mean_accuracy;
  j["bottom_decile_accuracy"] = report.bottom_decile_accuracy;
  j["bottom_decile_revenue"] = report.bottom_decile_revenue;
  j["client_revenue"] = std::vector<double>(
      report.client_revenue.data(), report.client_revenue.data() + report.client_revenue.size());
  j["client_accuracy"] =
      std::vector<double>(report.client_accuracy.data(),
                          report.client_accuracy.data() + report.client_accuracy.size());
  j["rounds_run"] = report.rounds.size();
  return j;
}

}  // namespace

nlohmann::json summary_to_json(const SimConfig& config, const MetricsReport& train,
                               const MetricsReport& test) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["seeds"] = {{"train", config.seeds.train},
                {"eval", config.seeds.eval},
                {"test", config.seeds.test}};
  j["train"] = report_to_json(train);
  j["test"] = report_to_json(test);
  return j;
}

}  // namespace flmkt
