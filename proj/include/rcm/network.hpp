#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "rcm/common.hpp"

namespace rcm {

enum class RoadLevel : uint8_t {
  primary = 0,
  secondary,
  tertiary,
  living_street,
  residential,
  unclassified,
};
constexpr int kNumLevels = 6;
RoadLevel parse_level(const std::string& s, const std::string& where);
const char* level_name(RoadLevel level);

struct NodeRecord {
  int64_t id;
  double x;
  double y;
};

struct LinkRecord {
  int64_t id;
  int64_t from_node;
  int64_t to_node;
  double length_m;
  RoadLevel level;
};

// Directed link graph. Links are addressed by dense index internally; the
// original ids survive for file IO. Adjacency is stored data: loaders build
// it from shared nodes, the synthetic generator may exclude u-turn twins.
class RoadNetwork {
 public:
  static RoadNetwork build(std::vector<NodeRecord> nodes,
                           std::vector<LinkRecord> links);
  static RoadNetwork build_with_adjacency(
      std::vector<NodeRecord> nodes, std::vector<LinkRecord> links,
      std::vector<std::pair<int64_t, int64_t>> adjacency_pairs);

  size_t num_links() const { return links_.size(); }
  size_t num_nodes() const { return nodes_.size(); }
  const LinkRecord& link(size_t idx) const { return links_[idx]; }
  const NodeRecord& node_of(int64_t node_id) const;
  const std::vector<int32_t>& successors(size_t link_idx) const {
    return adjacency_[link_idx];
  }
  const std::vector<int32_t>& predecessors(size_t link_idx) const {
    return reverse_adjacency_[link_idx];
  }

  size_t index_of(int64_t link_id) const;
  bool has_link(int64_t link_id) const;

  // Heading of the link in degrees, counter-clockwise from +x, from its
  // endpoint coordinates.
  double heading_deg(size_t link_idx) const;

  const std::vector<NodeRecord>& nodes() const { return nodes_; }
  const std::vector<LinkRecord>& links() const { return links_; }
  std::vector<std::pair<int64_t, int64_t>> adjacency_pairs() const;

 private:
  std::vector<NodeRecord> nodes_;
  std::vector<LinkRecord> links_;
  std::vector<std::vector<int32_t>> adjacency_;
  std::vector<std::vector<int32_t>> reverse_adjacency_;
  std::map<int64_t, size_t> node_index_;
  std::map<int64_t, size_t> link_index_;
  void finish_build();
};

RoadNetwork load_network(const std::vector<NodeRecord>& nodes,
                         const std::vector<LinkRecord>& links);
RoadNetwork load_network_csv(const std::string& node_path,
                             const std::string& link_path,
                             const std::string& adjacency_path = "");
void write_network_csv(const RoadNetwork& net, const std::string& node_path,
                       const std::string& link_path,
                       const std::string& adjacency_path);

// New network without the link; adjacency entries referencing it are gone.
RoadNetwork remove_link(const RoadNetwork& net, int64_t link_id);

// The 8 global movement directions, clockwise from straight ahead.
enum Direction : int8_t {
  kF = 0,
  kFR = 1,
  kR = 2,
  kBR = 3,
  kB = 4,
  kBL = 5,
  kL = 6,
  kFL = 7,
};
constexpr int kNumDirections = 8;
const char* direction_name(int dir);
// Signed heading difference, clockwise positive, in (-180, 180].
double turn_angle_deg(const RoadNetwork& net, size_t from_idx, size_t to_idx);

enum class TurnKind : uint8_t { straight, left, right, uturn };
TurnKind turn_kind(int dir);

// Per-link direction map after relabeling: no two successors of one link
// share a direction label, and every adjacency entry appears under exactly
// one label.
struct ActionTable {
  std::vector<std::array<int32_t, kNumDirections>> successor;  // -1 = invalid

  int32_t next(size_t link_idx, int dir) const {
    return successor[link_idx][dir];
  }
  int valid_count(size_t link_idx) const;
  // direction label used for the (from -> to) transition, -1 if absent
  int direction_of(size_t from_idx, size_t to_idx) const;
};

ActionTable build_action_table(const RoadNetwork& net);

struct PathMetrics {
  double distance_m = 0.0;
  int32_t n_links = 0;
  int32_t left_turns = 0;
  int32_t right_turns = 0;
  int32_t u_turns = 0;
  std::array<int32_t, kNumLevels> level_counts{};
};

// Shortest-path tree toward one destination over the link graph, edge
// weight = successor link length; the remaining path excludes the current
// link, so source == destination is the all-zero row.
struct DestinationTable {
  std::vector<double> distance_m;  // +inf if the destination is unreachable
  std::vector<int32_t> next_hop;   // -1 at the destination / unreachable
  std::vector<PathMetrics> metrics;
  bool reachable(size_t link_idx) const {
    return next_hop[link_idx] >= 0 || distance_m[link_idx] == 0.0;
  }
};

DestinationTable build_destination_table(const RoadNetwork& net,
                                         const ActionTable& at,
                                         size_t dest_idx);

struct FeatureConfig {
  double scale_m = 1000.0;     // divisor for lengths and distances
  bool dest_features = true;   // context block on/off
};

constexpr int kStateFeatureDim = 7;    // length + 6-level indicator
constexpr int kContextFeatureDim = 12; // dist, links, turns(4), levels(6)

// 3x3 spatial feature array: center = current link, 8 neighbours placed by
// direction, trailing validity channel (mask cells all zero, validity 0).
struct FeatureGrid {
  size_t channels = 0;
  std::vector<double> cells;  // 3*3*channels, row-major, channels last
  std::array<uint8_t, 9> cell_valid{};
};

// Direction -> cell index in the 3x3 grid (row*3+col); center is cell 4.
int grid_cell_of_direction(int dir);

// Immutable-after-construction feature provider with per-destination
// Dijkstra tables and grids filled lazily under a single-writer lock.
class FeatureCache {
 public:
  FeatureCache(const RoadNetwork& net, const ActionTable& at,
               FeatureConfig cfg);

  const RoadNetwork& net() const { return *net_; }
  const ActionTable& action_table() const { return *at_; }
  const FeatureConfig& config() const { return cfg_; }

  int context_dim() const { return cfg_.dest_features ? kContextFeatureDim : 0; }
  int h_dim() const { return kStateFeatureDim + context_dim(); }
  int grid_channels() const { return h_dim() + 1; }

  const DestinationTable& dest_table(size_t dest_idx) const;
  std::optional<PathMetrics> path_metrics(size_t source_idx,
                                          size_t dest_idx) const;

  std::array<double, kStateFeatureDim> state_features(size_t link_idx) const;
  // Throws UnreachableError when the destination cannot be reached.
  std::array<double, kContextFeatureDim> context_features(
      size_t link_idx, size_t dest_idx) const;

  // [F_s; F_c] of the link (context block omitted when disabled)
  std::vector<double> h_features(size_t link_idx, size_t dest_idx) const;

  FeatureGrid feature_grid(size_t link_idx, size_t dest_idx) const;
  // contiguous 9*grid_channels block, cached per destination
  const double* grid_ptr(size_t link_idx, size_t dest_idx) const;
  const uint8_t* grid_valid_ptr(size_t link_idx, size_t dest_idx) const;
  // contiguous h_dim() block of [F_s;F_c], cached per destination
  const double* h_ptr(size_t link_idx, size_t dest_idx) const;

  // A(s) restricted to successors that can still reach the destination.
  std::array<uint8_t, kNumDirections> action_mask(size_t link_idx,
                                                  size_t dest_idx) const;

 private:
  struct DestBlock {
    DestinationTable table;
    std::vector<double> grids;        // num_links * 9 * channels
    std::vector<uint8_t> cell_valid;  // num_links * 9
    std::vector<uint8_t> masks;       // num_links * 8
    std::vector<double> h_feats;      // num_links * h_dim
  };
  const DestBlock& block(size_t dest_idx) const;
  void fill_context(size_t link_idx, const DestinationTable& table,
                    double* out) const;

  const RoadNetwork* net_;
  const ActionTable* at_;
  FeatureConfig cfg_;
  std::vector<std::array<double, kStateFeatureDim>> state_;
  mutable std::mutex fill_mutex_;
  mutable std::map<size_t, DestBlock> blocks_;
};

}  // namespace rcm
