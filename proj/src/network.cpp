#include "rcm/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cctype>
#include <fstream>
#include <limits>
#include <queue>
#include <sstream>

namespace rcm {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kAngleEps = 1e-9;
}  // namespace

RoadLevel parse_level(const std::string& s, const std::string& where) {
  std::string t = trim(s);
  if (t == "primary") return RoadLevel::primary;
  if (t == "secondary") return RoadLevel::secondary;
  if (t == "tertiary") return RoadLevel::tertiary;
  if (t == "living_street" || t == "living-street")
    return RoadLevel::living_street;
  if (t == "residential") return RoadLevel::residential;
  if (t == "unclassified") return RoadLevel::unclassified;
  throw ParseError(where + ": unknown road level '" + s + "'");
}

const char* level_name(RoadLevel level) {
  switch (level) {
    case RoadLevel::primary: return "primary";
    case RoadLevel::secondary: return "secondary";
    case RoadLevel::tertiary: return "tertiary";
    case RoadLevel::living_street: return "living_street";
    case RoadLevel::residential: return "residential";
    case RoadLevel::unclassified: return "unclassified";
  }
  return "?";
}

const char* direction_name(int dir) {
  static const char* names[kNumDirections] = {"F",  "FR", "R", "BR",
                                              "B",  "BL", "L", "FL"};
  return dir >= 0 && dir < kNumDirections ? names[dir] : "?";
}

TurnKind turn_kind(int dir) {
  switch (dir) {
    case kF: return TurnKind::straight;
    case kL:
    case kFL:
    case kBL: return TurnKind::left;
    case kR:
    case kFR:
    case kBR: return TurnKind::right;
    case kB: return TurnKind::uturn;
  }
  throw ContractError("bad direction " + std::to_string(dir));
}

void RoadNetwork::finish_build() {
  node_index_.clear();
  link_index_.clear();
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!node_index_.emplace(nodes_[i].id, i).second)
      throw LoadError("duplicate node id " + std::to_string(nodes_[i].id));
  }
  for (size_t i = 0; i < links_.size(); ++i) {
    const LinkRecord& l = links_[i];
    if (!link_index_.emplace(l.id, i).second)
      throw LoadError("duplicate link id " + std::to_string(l.id));
    if (!(l.length_m > 0.0))
      throw LoadError("link " + std::to_string(l.id) +
                      " has non-positive length " + format_double(l.length_m));
    for (int64_t n : {l.from_node, l.to_node})
      if (!node_index_.count(n))
        throw LoadError("link " + std::to_string(l.id) +
                        " references missing node " + std::to_string(n));
  }
  reverse_adjacency_.assign(links_.size(), {});
  for (size_t i = 0; i < adjacency_.size(); ++i) {
    std::sort(adjacency_[i].begin(), adjacency_[i].end());
    for (int32_t j : adjacency_[i]) {
      if (j < 0 || static_cast<size_t>(j) >= links_.size())
        throw LoadError("adjacency entry out of range");
      if (links_[i].to_node != links_[j].from_node)
        throw LoadError("adjacency " + std::to_string(links_[i].id) + " -> " +
                        std::to_string(links_[j].id) +
                        " does not share a node");
      reverse_adjacency_[j].push_back(static_cast<int32_t>(i));
    }
  }
  for (auto& v : reverse_adjacency_) std::sort(v.begin(), v.end());
}

RoadNetwork RoadNetwork::build(std::vector<NodeRecord> nodes,
                               std::vector<LinkRecord> links) {
  RoadNetwork net;
  net.nodes_ = std::move(nodes);
  net.links_ = std::move(links);
  net.adjacency_.assign(net.links_.size(), {});
  // adjacency from shared nodes: successors leave the head node
  std::map<int64_t, std::vector<int32_t>> out_at_node;
  for (size_t i = 0; i < net.links_.size(); ++i)
    out_at_node[net.links_[i].from_node].push_back(static_cast<int32_t>(i));
  for (size_t i = 0; i < net.links_.size(); ++i) {
    auto it = out_at_node.find(net.links_[i].to_node);
    if (it != out_at_node.end()) net.adjacency_[i] = it->second;
  }
  net.finish_build();
  return net;
}

RoadNetwork RoadNetwork::build_with_adjacency(
    std::vector<NodeRecord> nodes, std::vector<LinkRecord> links,
    std::vector<std::pair<int64_t, int64_t>> adjacency_pairs) {
  RoadNetwork net;
  net.nodes_ = std::move(nodes);
  net.links_ = std::move(links);
  std::map<int64_t, size_t> link_idx;
  for (size_t i = 0; i < net.links_.size(); ++i) {
    if (!link_idx.emplace(net.links_[i].id, i).second)
      throw LoadError("duplicate link id " +
                      std::to_string(net.links_[i].id));
  }
  net.adjacency_.assign(net.links_.size(), {});
  for (const auto& [from, to] : adjacency_pairs) {
    auto a = link_idx.find(from);
    auto b = link_idx.find(to);
    if (a == link_idx.end() || b == link_idx.end())
      throw LoadError("adjacency references missing link " +
                      std::to_string(a == link_idx.end() ? from : to));
    net.adjacency_[a->second].push_back(static_cast<int32_t>(b->second));
  }
  net.finish_build();
  return net;
}

const NodeRecord& RoadNetwork::node_of(int64_t node_id) const {
  auto it = node_index_.find(node_id);
  if (it == node_index_.end())
    throw LoadError("unknown node id " + std::to_string(node_id));
  return nodes_[it->second];
}

size_t RoadNetwork::index_of(int64_t link_id) const {
  auto it = link_index_.find(link_id);
  if (it == link_index_.end())
    throw LoadError("unknown link id " + std::to_string(link_id));
  return it->second;
}

bool RoadNetwork::has_link(int64_t link_id) const {
  return link_index_.count(link_id) != 0;
}

double RoadNetwork::heading_deg(size_t link_idx) const {
  const LinkRecord& l = links_[link_idx];
  const NodeRecord& a = node_of(l.from_node);
  const NodeRecord& b = node_of(l.to_node);
  return std::atan2(b.y - a.y, b.x - a.x) * 180.0 / M_PI;
}

std::vector<std::pair<int64_t, int64_t>> RoadNetwork::adjacency_pairs()
    const {
  std::vector<std::pair<int64_t, int64_t>> out;
  for (size_t i = 0; i < links_.size(); ++i)
    for (int32_t j : adjacency_[i])
      out.emplace_back(links_[i].id, links_[static_cast<size_t>(j)].id);
  return out;
}

RoadNetwork load_network(const std::vector<NodeRecord>& nodes,
                         const std::vector<LinkRecord>& links) {
  return RoadNetwork::build(nodes, links);
}

namespace {
bool looks_like_header(const std::string& line) {
  for (char c : line)
    if (std::isalpha(static_cast<unsigned char>(c))) return true;
  return false;
}
}  // namespace

RoadNetwork load_network_csv(const std::string& node_path,
                             const std::string& link_path,
                             const std::string& adjacency_path) {
  std::ifstream nf(node_path);
  if (!nf) throw LoadError("cannot read node file " + node_path);
  std::vector<NodeRecord> nodes;
  std::string line;
  size_t lineno = 0;
  while (std::getline(nf, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || (lineno == 1 && looks_like_header(t))) continue;
    auto f = split(t, ',');
    const std::string where = node_path + ":" + std::to_string(lineno);
    if (f.size() != 3) throw ParseError(where + ": expected node_id,x,y");
    nodes.push_back(NodeRecord{parse_int(f[0], where),
                               parse_double(f[1], where),
                               parse_double(f[2], where)});
  }
  std::ifstream lf(link_path);
  if (!lf) throw LoadError("cannot read link file " + link_path);
  std::vector<LinkRecord> links;
  lineno = 0;
  while (std::getline(lf, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || (lineno == 1 && looks_like_header(t))) continue;
    auto f = split(t, ',');
    const std::string where = link_path + ":" + std::to_string(lineno);
    if (f.size() != 5)
      throw ParseError(where +
                       ": expected link_id,from_node,to_node,length_m,level");
    links.push_back(LinkRecord{parse_int(f[0], where), parse_int(f[1], where),
                               parse_int(f[2], where),
                               parse_double(f[3], where),
                               parse_level(f[4], where)});
  }
  if (adjacency_path.empty()) return RoadNetwork::build(nodes, links);
  std::ifstream af(adjacency_path);
  if (!af) throw LoadError("cannot read adjacency file " + adjacency_path);
  std::vector<std::pair<int64_t, int64_t>> pairs;
  lineno = 0;
  while (std::getline(af, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || (lineno == 1 && looks_like_header(t))) continue;
    auto f = split(t, ',');
    const std::string where = adjacency_path + ":" + std::to_string(lineno);
    if (f.size() != 2) throw ParseError(where + ": expected from_link,to_link");
    pairs.emplace_back(parse_int(f[0], where), parse_int(f[1], where));
  }
  return RoadNetwork::build_with_adjacency(nodes, links, std::move(pairs));
}

void write_network_csv(const RoadNetwork& net, const std::string& node_path,
                       const std::string& link_path,
                       const std::string& adjacency_path) {
  std::ofstream nf(node_path);
  if (!nf) throw LoadError("cannot write " + node_path);
  nf << "node_id,x,y\n";
  for (const auto& n : net.nodes())
    nf << n.id << ',' << format_double(n.x) << ',' << format_double(n.y)
       << '\n';
  std::ofstream lf(link_path);
  if (!lf) throw LoadError("cannot write " + link_path);
  lf << "link_id,from_node,to_node,length_m,level\n";
  for (const auto& l : net.links())
    lf << l.id << ',' << l.from_node << ',' << l.to_node << ','
       << format_double(l.length_m) << ',' << level_name(l.level) << '\n';
  if (adjacency_path.empty()) return;
  std::ofstream af(adjacency_path);
  if (!af) throw LoadError("cannot write " + adjacency_path);
  af << "from_link,to_link\n";
  for (const auto& [a, b] : net.adjacency_pairs()) af << a << ',' << b << '\n';
}

RoadNetwork remove_link(const RoadNetwork& net, int64_t link_id) {
  const size_t gone = net.index_of(link_id);
  std::vector<LinkRecord> links;
  links.reserve(net.num_links() - 1);
  for (size_t i = 0; i < net.num_links(); ++i)
    if (i != gone) links.push_back(net.link(i));
  std::vector<std::pair<int64_t, int64_t>> pairs;
  for (const auto& [a, b] : net.adjacency_pairs())
    if (a != link_id && b != link_id) pairs.emplace_back(a, b);
  return RoadNetwork::build_with_adjacency(net.nodes(), std::move(links),
                                           std::move(pairs));
}

double turn_angle_deg(const RoadNetwork& net, size_t from_idx, size_t to_idx) {
  // clockwise-positive heading difference in (-180, 180]
  double d = net.heading_deg(from_idx) - net.heading_deg(to_idx);
  while (d <= -180.0) d += 360.0;
  while (d > 180.0) d -= 360.0;
  return d;
}

namespace {
double sector_center_deg(int dir) {
  // F..FL clockwise, mapped into (-180, 180]
  double a = 45.0 * dir;
  if (a > 180.0) a -= 360.0;
  return a;
}

double angular_dist(double theta, double center) {
  double d = theta - center;
  while (d <= -180.0) d += 360.0;
  while (d > 180.0) d -= 360.0;
  return std::fabs(d);
}

int natural_sector(double theta) {
  // round half away from zero; +-180 both land on B
  int k = static_cast<int>(std::floor(std::fabs(theta) / 45.0 + 0.5));
  if (theta < 0.0) k = -k;
  return ((k % 8) + 8) % 8;
}
}  // namespace

ActionTable build_action_table(const RoadNetwork& net) {
  ActionTable at;
  at.successor.assign(net.num_links(),
                      {-1, -1, -1, -1, -1, -1, -1, -1});
  for (size_t s = 0; s < net.num_links(); ++s) {
    const auto& succ = net.successors(s);
    if (succ.size() > kNumDirections)
      throw LoadError("link " + std::to_string(net.link(s).id) + " has " +
                      std::to_string(succ.size()) +
                      " successors; cannot label 8 directions");
    struct Cand {
      int32_t idx;
      double theta;
      double natural_dev;
      int natural;
    };
    std::vector<Cand> cands;
    cands.reserve(succ.size());
    for (int32_t sp : succ) {
      const double theta = turn_angle_deg(net, s, static_cast<size_t>(sp));
      const int nat = natural_sector(theta);
      cands.push_back(
          Cand{sp, theta, angular_dist(theta, sector_center_deg(nat)), nat});
    }
    // the successor closest to its natural sector center keeps it; the
    // rest move to the nearest free sector
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (std::fabs(a.natural_dev - b.natural_dev) > kAngleEps)
        return a.natural_dev < b.natural_dev;
      return a.idx < b.idx;
    });
    auto& row = at.successor[s];
    for (const Cand& c : cands) {
      int best = -1;
      double best_dist = 0.0;
      for (int dir = 0; dir < kNumDirections; ++dir) {
        if (row[dir] != -1) continue;
        const double center = sector_center_deg(dir);
        const double dist = angular_dist(c.theta, center);
        if (best == -1 || dist < best_dist - kAngleEps) {
          best = dir;
          best_dist = dist;
        } else if (dist < best_dist + kAngleEps) {
          // tie: prefer the sector on the side of the true angle's sign,
          // then the earlier label in F,FR,R,... order (FR before FL)
          auto side = [](double center_deg) {
            return center_deg > kAngleEps ? 1 : (center_deg < -kAngleEps ? -1 : 0);
          };
          const int want = c.theta > kAngleEps ? 1
                           : (c.theta < -kAngleEps ? -1 : 0);
          const int cur_match = side(sector_center_deg(best)) == want;
          const int new_match = side(center) == want;
          if (new_match > cur_match || (new_match == cur_match && dir < best)) {
            best = dir;
            best_dist = dist;
          }
        }
      }
      if (best == -1)
        throw LoadError("relabeling overflow at link " +
                        std::to_string(net.link(s).id));
      row[best] = c.idx;
    }
  }
  return at;
}

int ActionTable::valid_count(size_t link_idx) const {
  int n = 0;
  for (int32_t v : successor[link_idx]) n += v >= 0;
  return n;
}

int ActionTable::direction_of(size_t from_idx, size_t to_idx) const {
  const auto& row = successor[from_idx];
  for (int dir = 0; dir < kNumDirections; ++dir)
    if (row[dir] == static_cast<int32_t>(to_idx)) return dir;
  return -1;
}

DestinationTable build_destination_table(const RoadNetwork& net,
                                         const ActionTable& at,
                                         size_t dest_idx) {
  const size_t n = net.num_links();
  DestinationTable table;
  table.distance_m.assign(n, kInf);
  table.next_hop.assign(n, -1);
  table.metrics.assign(n, PathMetrics{});
  table.distance_m[dest_idx] = 0.0;

  using QEntry = std::pair<double, size_t>;  // (distance, link)
  std::priority_queue<QEntry, std::vector<QEntry>, std::greater<>> q;
  q.emplace(0.0, dest_idx);
  while (!q.empty()) {
    auto [d, v] = q.top();
    q.pop();
    if (d > table.distance_m[v] + 1e-12) continue;
    const double step = net.link(v).length_m;
    for (int32_t u : net.predecessors(v)) {
      const double cand = table.distance_m[v] + step;
      double& du = table.distance_m[u];
      if (cand < du - 1e-12) {
        du = cand;
        table.next_hop[u] = static_cast<int32_t>(v);
        q.emplace(cand, static_cast<size_t>(u));
      } else if (cand < du + 1e-12 && table.next_hop[u] >= 0 &&
                 static_cast<int32_t>(v) < table.next_hop[u]) {
        table.next_hop[u] = static_cast<int32_t>(v);  // deterministic ties
      }
    }
  }

  // accumulate remaining-path metrics down the tree (iterative, memoized)
  std::vector<uint8_t> done(n, 0);
  done[dest_idx] = 1;
  for (size_t s = 0; s < n; ++s) {
    if (done[s] || table.next_hop[s] < 0) continue;
    std::vector<size_t> chain;
    size_t cur = s;
    while (!done[cur]) {
      chain.push_back(cur);
      cur = static_cast<size_t>(table.next_hop[cur]);
    }
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      const size_t u = *it;
      const size_t v = static_cast<size_t>(table.next_hop[u]);
      PathMetrics m = table.metrics[v];
      m.distance_m = table.distance_m[u];
      m.n_links += 1;
      m.level_counts[static_cast<int>(net.link(v).level)] += 1;
      const int dir = at.direction_of(u, v);
      if (dir < 0)
        throw ContractError("shortest tree edge missing from action table");
      switch (turn_kind(dir)) {
        case TurnKind::left: m.left_turns += 1; break;
        case TurnKind::right: m.right_turns += 1; break;
        case TurnKind::uturn: m.u_turns += 1; break;
        case TurnKind::straight: break;
      }
      table.metrics[u] = m;
      done[u] = 1;
    }
  }
  return table;
}

int grid_cell_of_direction(int dir) {
  static const int cell[kNumDirections] = {1, 2, 5, 8, 7, 6, 3, 0};
  return cell[dir];
}

FeatureCache::FeatureCache(const RoadNetwork& net, const ActionTable& at,
                           FeatureConfig cfg)
    : net_(&net), at_(&at), cfg_(cfg) {
  state_.resize(net.num_links());
  for (size_t i = 0; i < net.num_links(); ++i) {
    auto& f = state_[i];
    f.fill(0.0);
    f[0] = net.link(i).length_m / cfg_.scale_m;
    f[1 + static_cast<int>(net.link(i).level)] = 1.0;
  }
}

const DestinationTable& FeatureCache::dest_table(size_t dest_idx) const {
  return block(dest_idx).table;
}

std::optional<PathMetrics> FeatureCache::path_metrics(size_t source_idx,
                                                      size_t dest_idx) const {
  const DestinationTable& t = dest_table(dest_idx);
  if (source_idx == dest_idx) return PathMetrics{};
  if (!t.reachable(source_idx)) return std::nullopt;
  return t.metrics[source_idx];
}

std::array<double, kStateFeatureDim> FeatureCache::state_features(
    size_t link_idx) const {
  return state_[link_idx];
}

void FeatureCache::fill_context(size_t link_idx,
                                const DestinationTable& table,
                                double* out) const {
  const PathMetrics& m = table.metrics[link_idx];
  out[0] = m.distance_m / cfg_.scale_m;
  out[1] = m.n_links;
  out[2] = m.left_turns;
  out[3] = m.right_turns;
  out[4] = m.u_turns;
  out[5] = m.left_turns + m.right_turns + m.u_turns;
  for (int k = 0; k < kNumLevels; ++k) out[6 + k] = m.level_counts[k];
}

std::array<double, kContextFeatureDim> FeatureCache::context_features(
    size_t link_idx, size_t dest_idx) const {
  const DestinationTable& t = dest_table(dest_idx);
  if (link_idx != dest_idx && !t.reachable(link_idx))
    throw UnreachableError("destination link " +
                           std::to_string(net_->link(dest_idx).id) +
                           " unreachable from link " +
                           std::to_string(net_->link(link_idx).id));
  std::array<double, kContextFeatureDim> out{};
  fill_context(link_idx, t, out.data());
  return out;
}

std::vector<double> FeatureCache::h_features(size_t link_idx,
                                             size_t dest_idx) const {
  std::vector<double> out(h_dim());
  const auto& fs = state_[link_idx];
  std::copy(fs.begin(), fs.end(), out.begin());
  if (cfg_.dest_features) {
    auto fc = context_features(link_idx, dest_idx);
    std::copy(fc.begin(), fc.end(), out.begin() + kStateFeatureDim);
  }
  return out;
}

const FeatureCache::DestBlock& FeatureCache::block(size_t dest_idx) const {
  if (dest_idx >= net_->num_links())
    throw ContractError("destination link index " + std::to_string(dest_idx) +
                        " out of range");
  std::lock_guard<std::mutex> lock(fill_mutex_);
  auto it = blocks_.find(dest_idx);
  if (it != blocks_.end()) return it->second;

  DestBlock b;
  b.table = build_destination_table(*net_, *at_, dest_idx);
  const size_t n = net_->num_links();
  const size_t ch = grid_channels();
  const size_t hd = h_dim();
  b.grids.assign(n * 9 * ch, 0.0);
  b.cell_valid.assign(n * 9, 0);
  b.masks.assign(n * kNumDirections, 0);
  b.h_feats.assign(n * hd, 0.0);

  auto write_cell = [&](double* grid, uint8_t* valid, int cell,
                        size_t link_idx) {
    double* dst = grid + cell * ch;
    const auto& fs = state_[link_idx];
    std::copy(fs.begin(), fs.end(), dst);
    if (cfg_.dest_features)
      fill_context(link_idx, b.table, dst + kStateFeatureDim);
    dst[ch - 1] = 1.0;  // validity channel
    valid[cell] = 1;
  };

  for (size_t s = 0; s < n; ++s) {
    if (s != dest_idx && !b.table.reachable(s)) continue;
    double* hf = &b.h_feats[s * hd];
    const auto& fs = state_[s];
    std::copy(fs.begin(), fs.end(), hf);
    if (cfg_.dest_features) fill_context(s, b.table, hf + kStateFeatureDim);
    double* grid = &b.grids[s * 9 * ch];
    uint8_t* valid = &b.cell_valid[s * 9];
    write_cell(grid, valid, 4, s);  // center
    for (int dir = 0; dir < kNumDirections; ++dir) {
      const int32_t sp = at_->next(s, dir);
      if (sp < 0) continue;
      const size_t spi = static_cast<size_t>(sp);
      if (spi != dest_idx && !b.table.reachable(spi))
        continue;  // masked, not an error
      write_cell(grid, valid, grid_cell_of_direction(dir), spi);
      b.masks[s * kNumDirections + dir] = 1;
    }
  }
  return blocks_.emplace(dest_idx, std::move(b)).first->second;
}

FeatureGrid FeatureCache::feature_grid(size_t link_idx,
                                       size_t dest_idx) const {
  const DestBlock& b = block(dest_idx);
  FeatureGrid g;
  g.channels = grid_channels();
  g.cells.assign(b.grids.begin() + link_idx * 9 * g.channels,
                 b.grids.begin() + (link_idx + 1) * 9 * g.channels);
  std::copy(b.cell_valid.begin() + link_idx * 9,
            b.cell_valid.begin() + (link_idx + 1) * 9, g.cell_valid.begin());
  return g;
}

const double* FeatureCache::grid_ptr(size_t link_idx, size_t dest_idx) const {
  return &block(dest_idx).grids[link_idx * 9 * grid_channels()];
}

const uint8_t* FeatureCache::grid_valid_ptr(size_t link_idx,
                                            size_t dest_idx) const {
  return &block(dest_idx).cell_valid[link_idx * 9];
}

const double* FeatureCache::h_ptr(size_t link_idx, size_t dest_idx) const {
  return &block(dest_idx).h_feats[link_idx * h_dim()];
}

std::array<uint8_t, kNumDirections> FeatureCache::action_mask(
    size_t link_idx, size_t dest_idx) const {
  const DestBlock& b = block(dest_idx);
  std::array<uint8_t, kNumDirections> m{};
  std::copy(b.masks.begin() + link_idx * kNumDirections,
            b.masks.begin() + (link_idx + 1) * kNumDirections, m.begin());
  return m;
}

}  // namespace rcm
