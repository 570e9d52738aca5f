#include "flmkt/bidding.hpp"

#include <algorithm>
#include <cmath>

#include "flmkt/errors.hpp"
#include "flmkt/tinynet.hpp"

namespace flmkt {

BuyerProfile::BuyerProfile(ClientId id_, double utility_cap_, int n_clients, Strategy strategy_,
                           double epsilon_, int exploration_rounds_)
    : id(id_),
      utility_cap(utility_cap_),
      revenue_list(Eigen::VectorXd::Zero(n_clients)),
      win_counts(Eigen::VectorXi::Zero(n_clients)),
      strategy(strategy_),
      epsilon(epsilon_),
      exploration_rounds(exploration_rounds_) {
  if (utility_cap <= 0.0) throw ConfigError("BuyerProfile: utility cap must be positive");
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw ConfigError("BuyerProfile: epsilon must lie in [0, 1]");
}

namespace {

std::vector<ClientId> eligible_sellers(const BuyerProfile& profile,
                                       const std::vector<ClientId>& authorized) {
  std::vector<ClientId> out;
  for (ClientId j : authorized)
    if (j != profile.id) out.push_back(j);
  return out;
}

Eigen::VectorXd scatter(const BuyerProfile& profile, const std::vector<ClientId>& sellers,
                        const Eigen::VectorXd& amounts) {
  Eigen::VectorXd bids = Eigen::VectorXd::Zero(profile.revenue_list.size());
  for (std::size_t i = 0; i < sellers.size(); ++i) bids(sellers[i]) = amounts(i);
  return bids;
}

}  // namespace

Eigen::VectorXd stochastic_bid(const BuyerProfile& profile,
                               const std::vector<ClientId>& authorized, rng::Engine& eng) {
  const auto sellers = eligible_sellers(profile, authorized);
  if (sellers.empty()) return Eigen::VectorXd::Zero(profile.revenue_list.size());
  Eigen::VectorXd raw(sellers.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw(i) = std::abs(rng::normal(eng));
  const double total = raw.sum();
  if (total > 0.0) {
    raw *= profile.utility_cap / total;
  } else {
    raw.setConstant(profile.utility_cap / static_cast<double>(raw.size()));
  }
  return scatter(profile, sellers, raw);
}

Eigen::VectorXd greedy_bid(const BuyerProfile& profile, const std::vector<ClientId>& authorized) {
  const auto sellers = eligible_sellers(profile, authorized);
  if (sellers.empty()) return Eigen::VectorXd::Zero(profile.revenue_list.size());
  Eigen::VectorXd scores(sellers.size());
  for (std::size_t i = 0; i < sellers.size(); ++i) {
    const ClientId j = sellers[i];
    scores(i) = profile.revenue_list(j) / std::max(profile.win_counts(j), 1);
  }
  const Eigen::VectorXd amounts = net::softmax(scores) * profile.utility_cap;
  return scatter(profile, sellers, amounts);
}

Eigen::VectorXd eps_greedy_bid(const BuyerProfile& profile,
                               const std::vector<ClientId>& authorized, rng::Engine& eng) {
  const double p = rng::uniform01(eng);
  if (p > profile.epsilon) return greedy_bid(profile, authorized);
  return stochastic_bid(profile, authorized, eng);
}

Eigen::VectorXd make_bid(const BuyerProfile& profile, const std::vector<ClientId>& authorized,
                         int round, rng::Engine& eng) {
  if (round < profile.exploration_rounds) return stochastic_bid(profile, authorized, eng);
  switch (profile.strategy) {
    case Strategy::kStochastic: return stochastic_bid(profile, authorized, eng);
    case Strategy::kGreedy: return greedy_bid(profile, authorized);
    case Strategy::kEpsGreedy: return eps_greedy_bid(profile, authorized, eng);
  }
  throw StructuralError("make_bid: unknown strategy");
}

void record_outcome(BuyerProfile& profile, const std::vector<ClientId>& won_sellers,
                    double delta_gain) {
  const double credit = std::max(delta_gain, 0.0);
  for (ClientId j : won_sellers) {
    profile.win_counts(j) += 1;
    profile.revenue_list(j) += credit;
  }
}

}  // namespace flmkt
