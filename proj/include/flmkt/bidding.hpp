#pragma once

#include <Eigen/Core>
#include <vector>

#include "flmkt/core.hpp"
#include "flmkt/rng.hpp"

namespace flmkt {

enum class Strategy { kStochastic, kGreedy, kEpsGreedy };

// One buyer's standing state: its budget per unit gain and what it
// remembers about each seller.
struct BuyerProfile {
  ClientId id = -1;
  double utility_cap = 0.0;       // max total bid per round
  Eigen::VectorXd revenue_list;   // accumulated credited gain per seller
  Eigen::VectorXi win_counts;     // wins per seller
  Strategy strategy = Strategy::kStochastic;
  double epsilon = 0.1;
  int exploration_rounds = 0;

  BuyerProfile() = default;
  BuyerProfile(ClientId id_, double utility_cap_, int n_clients, Strategy strategy_,
               double epsilon_, int exploration_rounds_);
};

// |N(0,1)| per authorized seller, rescaled so the row sums to the cap.
Eigen::VectorXd stochastic_bid(const BuyerProfile& profile,
                               const std::vector<ClientId>& authorized, rng::Engine& eng);

// softmax(revenue per win) over authorized sellers, scaled to the cap.
Eigen::VectorXd greedy_bid(const BuyerProfile& profile, const std::vector<ClientId>& authorized);

// Greedy with probability 1 - epsilon, stochastic otherwise.
Eigen::VectorXd eps_greedy_bid(const BuyerProfile& profile,
                               const std::vector<ClientId>& authorized, rng::Engine& eng);

// Strategy dispatch. Early rounds (round < exploration_rounds) always take
// the stochastic path so greedy memory has something to chew on.
Eigen::VectorXd make_bid(const BuyerProfile& profile, const std::vector<ClientId>& authorized,
                         int round, rng::Engine& eng);

// Credits this round's outcome: each won seller gets a win tick and the
// clamped gain added to its revenue entry.
void record_outcome(BuyerProfile& profile, const std::vector<ClientId>& won_sellers,
                    double delta_gain);

}  // namespace flmkt
