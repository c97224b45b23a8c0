#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/eval.hpp"
#include "stgraph/graph.hpp"
#include "stgraph/ingest.hpp"

namespace stgraph {

/// One cell of a profile's transition kernel: a movement template with its
/// sampling probability.
struct KernelEntry {
  int origin_category = 0;
  int dest_category = 0;
  int departure_bin = 0;
  int duration_bins = 1;
  double prob = 0.0;
};

/// Planted mobility routine: a user of this profile starts each day at the
/// home category and chains movements whose departure never precedes the
/// previous arrival.
struct MobilityProfile {
  std::string profile_id;
  int home_category = 0;
  int movements_min = 4;
  int movements_max = 5;
  std::vector<KernelEntry> kernel;  // probabilities sum to 1
};

inline void validate_profile(const MobilityProfile& p, int num_bins = kNumTimeBins) {
  if (p.kernel.empty()) throw DataError("profile " + p.profile_id + ": empty kernel");
  double sum = 0.0;
  bool any_valid = false;
  for (const KernelEntry& e : p.kernel) {
    if (e.prob < 0.0) throw DataError("profile " + p.profile_id + ": negative probability");
    if (e.departure_bin < 0 || e.duration_bins < 0 ||
        e.departure_bin + e.duration_bins >= num_bins) {
      throw DataError("profile " + p.profile_id + ": kernel mass on invalid bins");
    }
    any_valid = any_valid || e.prob > 0.0;
    sum += e.prob;
  }
  if (!any_valid) throw DataError("profile " + p.profile_id + ": infeasible kernel");
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw DataError("profile " + p.profile_id + ": kernel probabilities sum to " +
                    format_real(sum));
  }
  if (p.movements_min < 1 || p.movements_max < p.movements_min) {
    throw DataError("profile " + p.profile_id + ": bad movement count range");
  }
}

/// The kernel's (destination category, arrival bin) marginal, laid out like
/// the joint target vector.
inline std::vector<double> kernel_joint_marginal(const MobilityProfile& p, int num_classes = 10,
                                                 int num_bins = kNumTimeBins) {
  std::vector<double> m(static_cast<std::size_t>(num_classes) * num_bins, 0.0);
  for (const KernelEntry& e : p.kernel) {
    m[static_cast<std::size_t>(e.dest_category) * num_bins + e.departure_bin + e.duration_bins] +=
        e.prob;
  }
  return m;
}

/// Jensen distance between two profiles' joint marginals.
inline double profile_distance(const MobilityProfile& a, const MobilityProfile& b,
                               int num_classes = 10, int num_bins = kNumTimeBins) {
  return jensen_distance(kernel_joint_marginal(a, num_classes, num_bins),
                         kernel_joint_marginal(b, num_classes, num_bins));
}

namespace detail {

/// A daily routine: morning commute, a two-way lunch choice with return,
/// then a branch between a short detour and heading straight home (the
/// detour path returns home one bin pair later). Kernel probabilities equal
/// the chain's expected per-movement rates, so sampled (category,
/// arrival-bin) frequencies converge to the kernel marginal.
inline MobilityProfile routine_profile(const std::string& id, int work, int lunch_a, int lunch_b,
                                       int detour, int morning_dep, int morning_dur, int lunch_dep,
                                       int lunch_dur, int return_dep, int branch_dep,
                                       int evening_dur) {
  constexpr int kHome = 0;
  MobilityProfile p;
  p.profile_id = id;
  p.home_category = kHome;
  p.movements_min = 4;
  p.movements_max = 5;
  // Per-day rates of the chain: every day walks morning, lunch, return and
  // the branch; the detour path adds a fifth movement when the sampled
  // count allows (probability 1/2), so 4.15 movements per day on average.
  const double total = 4.15;
  p.kernel = {
      {kHome, work, morning_dep, morning_dur, 1.0 / total},
      {work, lunch_a, lunch_dep, lunch_dur, 0.6 / total},
      {work, lunch_b, lunch_dep, lunch_dur, 0.4 / total},
      {lunch_a, work, return_dep, 1, 0.6 / total},
      {lunch_b, work, return_dep, 1, 0.4 / total},
      {work, detour, branch_dep, 1, 0.3 / total},
      {work, kHome, branch_dep, evening_dur, 0.7 / total},
      {detour, kHome, branch_dep + 2, evening_dur, 0.15 / total},
  };
  return p;
}

}  // namespace detail

/// Four well-separated planted routines over the default 10 categories.
inline std::vector<MobilityProfile> default_profiles() {
  // Categories: 0 residential, 1 education, 2 food, 3 transportation,
  // 4 medical, 5 office, 6 personal services, 7 government, 8 outdoor,
  // 9 others.
  return {
      detail::routine_profile("office", 5, 2, 6, 8, 16, 2, 24, 1, 26, 34, 2),
      detail::routine_profile("student", 1, 2, 9, 6, 15, 1, 22, 1, 24, 30, 2),
      detail::routine_profile("early_shift", 4, 2, 9, 3, 12, 1, 19, 1, 21, 26, 2),
      detail::routine_profile("errands", 7, 2, 8, 3, 18, 1, 25, 2, 28, 31, 2),
  };
}

struct SynthCorpus {
  std::vector<CheckinRecord> records;
  std::vector<std::pair<std::string, std::string>> labels;  // (user_id, profile_id)
  // Achieved total-variation between each user's sampled (category,
  // arrival-bin) frequencies and their profile's kernel marginal.
  std::vector<double> per_user_tv;
};

namespace detail {

inline Coordinates synth_venue_coords(std::size_t user_index, int category) {
  const std::uint64_t h = splitmix64(user_index * 131 + static_cast<std::uint64_t>(category));
  const double a = static_cast<double>(h >> 11) * 0x1.0p-53;
  const double b = static_cast<double>(splitmix64(h) >> 11) * 0x1.0p-53;
  return Coordinates{35.68 + 0.08 * (a - 0.5), 139.76 + 0.10 * (b - 0.5)};
}

}  // namespace detail

namespace detail {

// Choice groups of a kernel: entries sharing (origin, departure bin). The
// generator balances each group's picks across the days of one user, so a
// user's sampled frequencies track the kernel rates instead of drifting on
// day-level coin flips.
struct ChoiceGroup {
  std::vector<std::size_t> entries;  // indices into the kernel
};

inline std::vector<std::vector<std::size_t>> balanced_day_assignments(
    const MobilityProfile& prof, int days, Rng& rng) {
  std::map<std::pair<int, int>, ChoiceGroup> groups;
  for (std::size_t i = 0; i < prof.kernel.size(); ++i) {
    groups[{prof.kernel[i].origin_category, prof.kernel[i].departure_bin}].entries.push_back(i);
  }
  // assignment[entry_index] unused for singleton groups; for choice groups,
  // per-day winner entry index.
  std::vector<std::vector<std::size_t>> per_day(prof.kernel.size());
  for (auto& [key, group] : groups) {
    if (group.entries.size() < 2) continue;
    double mass = 0.0;
    for (std::size_t e : group.entries) mass += prof.kernel[e].prob;
    // Largest-remainder apportionment of days to entries.
    std::vector<std::size_t> counts(group.entries.size(), 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < group.entries.size(); ++k) {
      const double exact = prof.kernel[group.entries[k]].prob / mass * days;
      counts[k] = static_cast<std::size_t>(exact);
      assigned += counts[k];
      remainders.emplace_back(exact - static_cast<double>(counts[k]), k);
    }
    std::sort(remainders.rbegin(), remainders.rend());
    for (std::size_t k = 0; assigned < static_cast<std::size_t>(days); ++k, ++assigned) {
      counts[remainders[k % remainders.size()].second] += 1;
    }
    std::vector<std::size_t> winners;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      winners.insert(winners.end(), counts[k], group.entries[k]);
    }
    rng.shuffle(winners);
    for (std::size_t e : group.entries) per_day[e] = winners;
  }
  return per_day;
}

}  // namespace detail

/// Deterministic check-in generator. Every user gets one profile; every day
/// chains movements from the profile kernel, taking the earliest eligible
/// departure and resolving choice points from a per-user balanced day
/// schedule. Emitted records survive ingest with nothing dropped: time bins
/// ascend strictly within a day.
inline SynthCorpus generate(const std::vector<MobilityProfile>& profiles, int users_per_profile,
                            int days, std::uint64_t seed) {
  if (profiles.size() < 2) throw DataError("generate: need at least 2 profiles");
  if (days < 3) throw DataError("generate: need at least 3 days");
  for (const MobilityProfile& p : profiles) validate_profile(p);

  const auto& class_names = CategoryMap::default_class_names();
  const std::int64_t day0 = detail::days_from_civil(2024, 1, 1);

  SynthCorpus corpus;
  for (std::size_t pi = 0; pi < profiles.size(); ++pi) {
    const MobilityProfile& prof = profiles[pi];
    for (int ui = 0; ui < users_per_profile; ++ui) {
      const std::size_t user_index = pi * static_cast<std::size_t>(users_per_profile) +
                                     static_cast<std::size_t>(ui);
      char uid[16];
      std::snprintf(uid, sizeof(uid), "u%04zu", user_index);
      corpus.labels.emplace_back(uid, prof.profile_id);
      Rng rng(derive_seed(seed, 0xC0FFEE + user_index));
      const auto day_choice = detail::balanced_day_assignments(prof, days, rng);

      std::vector<double> counts(480, 0.0);
      double total = 0.0;
      for (int d = 0; d < days; ++d) {
        const CivilDate date = detail::civil_from_days(day0 + d);
        const int k = rng.uniform_int(prof.movements_min, prof.movements_max);
        int current_cat = prof.home_category;
        int current_bin = 0;
        int last_emitted_bin = -1;
        int last_emitted_cat = -1;

        auto emit = [&](int cat, int bin) {
          if (bin == last_emitted_bin && cat == last_emitted_cat) return;
          CheckinRecord r;
          r.user_id = uid;
          const int jitter = rng.uniform_int(0, 24);
          r.timestamp = Timestamp{date.year,    date.month,        date.day, bin / 2,
                                  (bin % 2) * 30 + jitter % 30,    0,        0};
          const Coordinates c = detail::synth_venue_coords(user_index, cat);
          r.latitude = c.latitude;
          r.longitude = c.longitude;
          r.venue_id = std::string(uid) + "c" + std::to_string(cat);
          r.raw_category = class_names[cat];
          corpus.records.push_back(std::move(r));
          last_emitted_bin = bin;
          last_emitted_cat = cat;
        };

        for (int step = 0; step < k; ++step) {
          // Next opportunity: among entries leaving from here no earlier
          // than the current bin, only the earliest departure competes.
          int next_dep = kNumTimeBins;
          for (const KernelEntry& e : prof.kernel) {
            if (e.origin_category == current_cat && e.departure_bin >= current_bin) {
              next_dep = std::min(next_dep, e.departure_bin);
            }
          }
          if (next_dep == kNumTimeBins) break;  // dead end: the day is over
          std::vector<std::size_t> candidates;
          for (std::size_t e = 0; e < prof.kernel.size(); ++e) {
            if (prof.kernel[e].origin_category == current_cat &&
                prof.kernel[e].departure_bin == next_dep) {
              candidates.push_back(e);
            }
          }
          const KernelEntry* chosen =
              candidates.size() == 1 ? &prof.kernel[candidates[0]]
                                     : &prof.kernel[day_choice[candidates[0]][d]];
          const int arr = chosen->departure_bin + chosen->duration_bins;
          emit(chosen->origin_category, chosen->departure_bin);
          emit(chosen->dest_category, arr);
          counts[static_cast<std::size_t>(chosen->dest_category) * kNumTimeBins + arr] += 1.0;
          total += 1.0;
          current_cat = chosen->dest_category;
          current_bin = arr;
        }
      }
      // Achieved convergence margin for this user.
      const std::vector<double> marginal = kernel_joint_marginal(prof);
      double tv = 0.0;
      for (std::size_t i = 0; i < counts.size(); ++i) {
        tv += std::fabs(counts[i] / total - marginal[i]);
      }
      corpus.per_user_tv.push_back(0.5 * tv);
    }
  }
  return corpus;
}

/// The check-in text format ingest consumes.
inline std::string serialize_checkins(const std::vector<CheckinRecord>& records) {
  std::ostringstream out;
  out << "user_id,timestamp,latitude,longitude,venue_id,category\n";
  for (const CheckinRecord& r : records) {
    out << r.user_id << "," << r.timestamp.to_string() << "," << format_real(r.latitude) << ","
        << format_real(r.longitude) << "," << r.venue_id << "," << r.raw_category << "\n";
  }
  return out.str();
}

inline std::string serialize_labels(const std::vector<std::pair<std::string, std::string>>& labels) {
  std::ostringstream out;
  out << "user_id,profile_id\n";
  for (const auto& [user, profile] : labels) out << user << "," << profile << "\n";
  return out.str();
}

inline std::vector<std::pair<std::string, std::string>> parse_labels(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("labels: empty file");
  std::vector<std::pair<std::string, std::string>> out;
  while (std::getline(in, line)) {
    auto sv = trim(line);
    if (sv.empty()) continue;
    auto cols = split(sv, ',');
    if (cols.size() != 2) throw DataError("labels: expected 2 columns");
    out.emplace_back(cols[0], cols[1]);
  }
  return out;
}

}  // namespace stgraph
