#include "flmkt/mechanism.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flmkt/rng.hpp"

namespace flmkt {

int MechanismParams::authorized_count() const {
  const double raw = seller_ratio * n_clients;
  const double nearest = std::round(raw);
  const double snapped = std::abs(raw - nearest) < 1e-9 ? nearest : std::ceil(raw);
  return static_cast<int>(snapped);
}

void MechanismParams::validate() const {
  if (n_clients < 2) throw ConfigError("mechanism: need at least 2 clients");
  if (copies_k < 1) throw ConfigError("mechanism: copies_k must be at least 1");
  if (copies_k >= n_clients)
    throw ConfigError("mechanism: copies_k must be below n_clients; selling a copy to every "
                      "other client removes the scarcity that makes overbidding unprofitable");
  if (!(seller_ratio > 0.0 && seller_ratio < 1.0))
    throw ConfigError("mechanism: seller_ratio must lie in (0, 1); authorizing every client to "
                      "sell each round lets bidders shade bids without risk");
  const int m = authorized_count();
  if (m < 1 || m >= n_clients)
    throw ConfigError("mechanism: authorized seller count " + std::to_string(m) +
                      " must satisfy 1 <= m < n_clients");
}

std::vector<ClientId> authorize_sellers(const MechanismParams& params, int round) {
  params.validate();
  auto eng = rng::child(params.rng_seed,
                        {static_cast<std::uint64_t>(rng::Stream::kAuthorize),
                         static_cast<std::uint64_t>(round)});
  const auto picks =
      rng::sample_subset(eng, params.n_clients, params.authorized_count());
  return {picks.begin(), picks.end()};
}

SellerRanking rank_bidders(ClientId seller, const Eigen::VectorXd& bids,
                           const Eigen::VectorXd& scores) {
  if (bids.size() != scores.size())
    throw StructuralError("rank_bidders: bid/score length mismatch");
  SellerRanking ranking;
  ranking.seller = seller;
  for (Eigen::Index i = 0; i < bids.size(); ++i) {
    const auto buyer = static_cast<ClientId>(i);
    if (buyer == seller) continue;
    if (bids(i) <= 0.0 || scores(i) <= 0.0) continue;
    ranking.ordered_bidders.push_back({buyer, scores(i), bids(i)});
  }
  std::sort(ranking.ordered_bidders.begin(), ranking.ordered_bidders.end(),
            [](const RankedBid& a, const RankedBid& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.buyer < b.buyer;
            });
  return ranking;
}

std::vector<RankedBid> select_winners(const SellerRanking& ranking, int copies_k) {
  if (copies_k < 1) throw ConfigError("select_winners: copies_k must be at least 1");
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(copies_k),
                                          ranking.ordered_bidders.size());
  return {ranking.ordered_bidders.begin(), ranking.ordered_bidders.begin() + take};
}

std::vector<Award> gsp_allocate(const std::vector<std::pair<ClientId, double>>& bids_for_seller,
                                int copies_k) {
  if (copies_k < 1) throw ConfigError("gsp_allocate: copies_k must be at least 1");
  std::vector<std::pair<ClientId, double>> order;
  for (const auto& [buyer, bid] : bids_for_seller) {
    if (bid > 0.0) order.emplace_back(buyer, bid);
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(copies_k), order.size());
  std::vector<Award> awards(take);
  for (std::size_t i = 0; i < take; ++i) {
    awards[i].buyer = order[i].first;
    awards[i].unit_price = i + 1 < order.size() ? order[i + 1].second : 0.0;
  }
  return awards;
}

std::vector<Award> critical_bid_payment(const SellerRanking& ranking, int copies_k,
                                        const Eigen::VectorXd& delta_by_client) {
  const auto winners = select_winners(ranking, copies_k);
  std::vector<Award> awards(winners.size());
  for (std::size_t i = 0; i < winners.size(); ++i) {
    const auto& w = winners[i];
    if (w.score <= 0.0) throw StructuralError("critical_bid_payment: zero score in ranking");
    awards[i].buyer = w.buyer;
    if (i + 1 < ranking.ordered_bidders.size()) {
      const auto& next = ranking.ordered_bidders[i + 1];
      awards[i].unit_price = next.bid * next.score / w.score;
    }
    if (w.buyer < 0 || w.buyer >= delta_by_client.size())
      throw StructuralError("critical_bid_payment: buyer id outside delta vector");
    awards[i].payment = awards[i].unit_price * std::max(delta_by_client(w.buyer), 0.0);
  }
  return awards;
}

}  // namespace flmkt
