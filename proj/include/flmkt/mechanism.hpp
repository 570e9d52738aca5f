#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "flmkt/core.hpp"
#include "flmkt/errors.hpp"

namespace flmkt {

struct MechanismParams {
  int n_clients = 0;
  int copies_k = 5;          // model copies a seller may hand out per round
  double seller_ratio = 0.7; // fraction of clients authorized to sell
  std::uint64_t rng_seed = 0;

  int authorized_count() const;
  void validate() const;
};

struct RankedBid {
  ClientId buyer = -1;
  double score = 0.0;
  double bid = 0.0;
};

// Bidders for one seller, best first. Ties in score resolve toward the
// smaller buyer id; the seller itself and zero entries never appear.
struct SellerRanking {
  ClientId seller = -1;
  std::vector<RankedBid> ordered_bidders;
};

struct Award {
  ClientId buyer = -1;
  double unit_price = 0.0; // currency per unit of round-over-round gain
  double payment = 0.0;    // unit_price times the clamped gain
};

// Uniform m-subset of clients allowed to sell this round, reproducible
// from (params.rng_seed, round). Returned ascending.
std::vector<ClientId> authorize_sellers(const MechanismParams& params, int round);

// Builds the per-seller ranking from one column of the bid/score matrices.
// Zero bids are abstentions; zero scores cannot price a critical bid, so
// both are dropped here.
SellerRanking rank_bidders(ClientId seller, const Eigen::VectorXd& bids,
                           const Eigen::VectorXd& scores);

// First min(k, |ranking|) entries in rank order.
std::vector<RankedBid> select_winners(const SellerRanking& ranking, int copies_k);

// Second-price baseline: rank by bid, winner at rank i pays the bid at
// rank i+1; with nobody below, the copy is free.
std::vector<Award> gsp_allocate(const std::vector<std::pair<ClientId, double>>& bids_for_seller,
                                int copies_k);

// Score-weighted critical-bid pricing. Winner at rank i pays
// b_next * a_next / a_i per unit of gain, and max(delta, 0) units are
// charged. delta_by_client is indexed by buyer id.
std::vector<Award> critical_bid_payment(const SellerRanking& ranking, int copies_k,
                                        const Eigen::VectorXd& delta_by_client);

}  // namespace flmkt
