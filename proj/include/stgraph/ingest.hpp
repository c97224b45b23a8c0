#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stgraph/common.hpp"

namespace stgraph {

// ----------------------------------------------------------------------------
// Civil time
// ----------------------------------------------------------------------------

struct CivilDate {
  int year = 1970;
  int month = 1;
  int day = 1;

  auto operator<=>(const CivilDate&) const = default;

  std::string to_string() const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", year, month, day);
    return buf;
  }
};

namespace detail {

// Days since 1970-01-01 for a proleptic Gregorian civil date.
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                       static_cast<unsigned>(d) - 1u;
  const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline CivilDate civil_from_days(std::int64_t z) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  return CivilDate{static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

}  // namespace detail

/// Local civil date-time with an explicit offset from UTC.
struct Timestamp {
  int year = 1970, month = 1, day = 1;
  int hour = 0, minute = 0, second = 0;
  int offset_minutes = 0;  // local = UTC + offset

  /// Seconds since the UTC epoch.
  std::int64_t epoch_seconds() const {
    return detail::days_from_civil(year, month, day) * 86400 + hour * 3600 + minute * 60 + second -
           static_cast<std::int64_t>(offset_minutes) * 60;
  }

  CivilDate local_date() const { return CivilDate{year, month, day}; }

  static Timestamp from_epoch(std::int64_t epoch, int offset_minutes) {
    const std::int64_t local = epoch + static_cast<std::int64_t>(offset_minutes) * 60;
    std::int64_t days = local / 86400;
    std::int64_t rem = local % 86400;
    if (rem < 0) {
      rem += 86400;
      days -= 1;
    }
    CivilDate d = detail::civil_from_days(days);
    Timestamp t;
    t.year = d.year;
    t.month = d.month;
    t.day = d.day;
    t.hour = static_cast<int>(rem / 3600);
    t.minute = static_cast<int>((rem % 3600) / 60);
    t.second = static_cast<int>(rem % 60);
    t.offset_minutes = offset_minutes;
    return t;
  }

  /// "YYYY-MM-DDTHH:MM:SS+HH:MM" (local wall time with offset).
  std::string to_string() const {
    char buf[40];
    const int oa = offset_minutes < 0 ? -offset_minutes : offset_minutes;
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d%c%02d:%02d", year, month, day,
                  hour, minute, second, offset_minutes < 0 ? '-' : '+', oa / 60, oa % 60);
    return buf;
  }

  bool operator<(const Timestamp& o) const { return epoch_seconds() < o.epoch_seconds(); }
  bool operator==(const Timestamp& o) const { return epoch_seconds() == o.epoch_seconds(); }
};

/// Parses "YYYY-MM-DD[T ]HH:MM[:SS][.fff][Z|±HH[:]MM]". A missing offset
/// falls back to `default_offset_minutes`. Fractional seconds are truncated.
inline Timestamp parse_timestamp(std::string_view s, int default_offset_minutes = 0) {
  auto fail = [&] { throw DataError("unparseable timestamp: '" + std::string(s) + "'"); };
  auto digits = [&](std::size_t pos, int count) {
    int v = 0;
    for (int i = 0; i < count; ++i) {
      if (pos + i >= s.size() || s[pos + i] < '0' || s[pos + i] > '9') fail();
      v = v * 10 + (s[pos + i] - '0');
    }
    return v;
  };
  if (s.size() < 16) fail();
  Timestamp t;
  t.year = digits(0, 4);
  if (s[4] != '-') fail();
  t.month = digits(5, 2);
  if (s[7] != '-') fail();
  t.day = digits(8, 2);
  if (s[10] != 'T' && s[10] != ' ') fail();
  t.hour = digits(11, 2);
  if (s[13] != ':') fail();
  t.minute = digits(14, 2);
  std::size_t pos = 16;
  if (pos < s.size() && s[pos] == ':') {
    t.second = digits(pos + 1, 2);
    pos += 3;
  }
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
  }
  if (pos == s.size()) {
    t.offset_minutes = default_offset_minutes;
  } else if (s[pos] == 'Z' && pos + 1 == s.size()) {
    t.offset_minutes = 0;
  } else if (s[pos] == '+' || s[pos] == '-') {
    const int sign = s[pos] == '-' ? -1 : 1;
    ++pos;
    const int oh = digits(pos, 2);
    pos += 2;
    if (pos < s.size() && s[pos] == ':') ++pos;
    int om = 0;
    if (pos < s.size()) {
      om = digits(pos, 2);
      pos += 2;
    }
    if (pos != s.size()) fail();
    t.offset_minutes = sign * (oh * 60 + om);
  } else {
    fail();
  }
  if (t.month < 1 || t.month > 12 || t.day < 1 || t.day > 31 || t.hour > 23 || t.minute > 59 ||
      t.second > 60) {
    fail();
  }
  return t;
}

/// Half-hour slot of the local civil day, 0..47.
inline int time_bin(const Timestamp& t) { return (t.hour * 60 + t.minute) / 30; }

// ----------------------------------------------------------------------------
// Records and trajectories
// ----------------------------------------------------------------------------

struct CheckinRecord {
  std::string user_id;
  Timestamp timestamp;
  double latitude = 0.0;
  double longitude = 0.0;
  std::string venue_id;      // empty = absent
  std::string raw_category;  // empty = absent
};

struct Visit {
  std::string location_key;
  int category = 0;
  Timestamp timestamp;
};

struct DailyTrajectory {
  std::string user_id;
  CivilDate date;
  std::vector<Visit> visits;  // strictly ascending timestamps, same civil date
};

struct Coordinates {
  double latitude = 0.0;
  double longitude = 0.0;
};

struct UserHistory {
  std::string user_id;
  std::vector<DailyTrajectory> trajectories;  // sorted by date
  // First observed coordinates per location key (the graph's distance weight
  // is computed from these).
  std::map<std::string, Coordinates> coordinates;
};

// ----------------------------------------------------------------------------
// Category mapping
// ----------------------------------------------------------------------------

/// Maps raw place-category strings onto a fixed set of classes; anything
/// unmapped lands in the "others" class.
class CategoryMap {
 public:
  static constexpr int kDefaultNumClasses = 10;

  /// The ten default class names. "others" is the catch-all.
  static const std::vector<std::string>& default_class_names() {
    static const std::vector<std::string> names = {
        "residential",        "education",  "food",   "transportation",
        "medical",            "office",     "personal services",
        "government",         "outdoor and recreation", "others"};
    return names;
  }

  CategoryMap() : class_names_(default_class_names()) {
    for (std::size_t i = 0; i < class_names_.size(); ++i) {
      mapping_[class_names_[i]] = static_cast<int>(i);
    }
    others_ = static_cast<int>(class_names_.size()) - 1;
  }

  /// Loads a two-column table "raw_category<delim>class_name" on top of the
  /// defaults. Class names must come from the class set.
  static CategoryMap load(const std::string& text, char delim = ',') {
    CategoryMap cm;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::string_view sv = trim(line);
      if (sv.empty() || sv.front() == '#') continue;
      auto cols = split(sv, delim);
      if (cols.size() != 2) {
        throw DataError("category map line " + std::to_string(line_no) + ": expected 2 columns");
      }
      const std::string raw = std::string(trim(cols[0]));
      const std::string cls = std::string(trim(cols[1]));
      int idx = -1;
      for (std::size_t i = 0; i < cm.class_names_.size(); ++i) {
        if (cm.class_names_[i] == cls) idx = static_cast<int>(i);
      }
      if (idx < 0) {
        throw DataError("category map line " + std::to_string(line_no) + ": unknown class '" +
                        cls + "'");
      }
      cm.mapping_[raw] = idx;
    }
    return cm;
  }

  int num_classes() const { return static_cast<int>(class_names_.size()); }
  int others_class() const { return others_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

  int map(const std::string& raw_category) const {
    if (raw_category.empty()) return others_;
    auto it = mapping_.find(raw_category);
    return it == mapping_.end() ? others_ : it->second;
  }

 private:
  std::vector<std::string> class_names_;
  std::map<std::string, int> mapping_;
  int others_ = 9;
};

// ----------------------------------------------------------------------------
// Parsing
// ----------------------------------------------------------------------------

struct FormatConfig {
  char delimiter = ',';
  std::string user_column = "user_id";
  std::string time_column = "timestamp";
  std::string lat_column = "latitude";
  std::string lon_column = "longitude";
  std::string venue_column = "venue_id";      // optional in the data
  std::string category_column = "category";   // optional in the data
  // "auto" detects integer epoch seconds vs ISO-8601 per value.
  std::string timestamp_format = "auto";      // auto | iso | epoch
  int default_offset_minutes = 0;
  bool strict = false;
};

struct ParseResult {
  std::vector<CheckinRecord> records;
  std::size_t invalid_lines = 0;
  std::vector<std::string> invalid_examples;  // first few, for diagnostics
};

/// Parses delimiter-separated check-ins with a header line. Invalid lines are
/// counted (strict mode turns the first one into a hard error naming its
/// line number).
inline ParseResult parse_checkins(std::istream& in, const FormatConfig& cfg) {
  std::string header;
  if (!std::getline(in, header)) throw DataError("empty check-in stream");
  auto cols = split(trim(header), cfg.delimiter);
  int ui = -1, ti = -1, lati = -1, loni = -1, vi = -1, ci = -1;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const std::string name = std::string(trim(cols[i]));
    if (name == cfg.user_column) ui = static_cast<int>(i);
    else if (name == cfg.time_column) ti = static_cast<int>(i);
    else if (name == cfg.lat_column) lati = static_cast<int>(i);
    else if (name == cfg.lon_column) loni = static_cast<int>(i);
    else if (name == cfg.venue_column) vi = static_cast<int>(i);
    else if (name == cfg.category_column) ci = static_cast<int>(i);
  }
  if (ui < 0 || ti < 0 || lati < 0 || loni < 0) {
    throw DataError("check-in header is missing a required column (need " + cfg.user_column + ", " +
                    cfg.time_column + ", " + cfg.lat_column + ", " + cfg.lon_column + ")");
  }

  ParseResult out;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv = trim(line);
    if (sv.empty()) continue;
    try {
      auto f = split(sv, cfg.delimiter);
      auto field = [&](int idx) -> std::string {
        if (idx < 0 || idx >= static_cast<int>(f.size())) return {};
        return std::string(trim(f[idx]));
      };
      CheckinRecord r;
      r.user_id = field(ui);
      if (r.user_id.empty()) throw DataError("empty user id");
      const std::string tv = field(ti);
      bool epoch = cfg.timestamp_format == "epoch";
      if (cfg.timestamp_format == "auto") {
        epoch = !tv.empty() && tv.find_first_not_of("0123456789-") == std::string::npos &&
                tv.find('-') == std::string::npos;
      }
      r.timestamp = epoch ? Timestamp::from_epoch(parse_int(tv), cfg.default_offset_minutes)
                          : parse_timestamp(tv, cfg.default_offset_minutes);
      r.latitude = parse_real(field(lati));
      r.longitude = parse_real(field(loni));
      if (r.latitude < -90.0 || r.latitude > 90.0 || r.longitude < -180.0 || r.longitude > 180.0) {
        throw DataError("coordinates out of bounds");
      }
      r.venue_id = field(vi);
      r.raw_category = field(ci);
      out.records.push_back(std::move(r));
    } catch (const DataError& e) {
      if (cfg.strict) {
        throw DataError("line " + std::to_string(line_no) + ": " + e.what());
      }
      ++out.invalid_lines;
      if (out.invalid_examples.size() < 5) {
        out.invalid_examples.push_back("line " + std::to_string(line_no) + ": " + e.what());
      }
    }
  }
  return out;
}

/// Venue id when present, else coordinates rounded to 4 decimals (~11 m grid).
inline std::string assign_location_key(const CheckinRecord& r) {
  if (!r.venue_id.empty()) return r.venue_id;
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4f:%.4f", r.latitude, r.longitude);
  return buf;
}

// ----------------------------------------------------------------------------
// Sessionization
// ----------------------------------------------------------------------------

struct SessionizeCounts {
  std::size_t kept = 0;
  std::size_t collapsed = 0;
  std::size_t dropped_singleton_day = 0;
};

/// Groups one user's records into per-day trajectories: sorts by time,
/// collapses consecutive duplicates (same key and same half-hour bin, or an
/// exactly repeated timestamp), and drops days left with fewer than 2 visits.
inline std::vector<DailyTrajectory> sessionize(std::vector<CheckinRecord> records,
                                               const CategoryMap& categories,
                                               UserHistory* coords_out = nullptr,
                                               SessionizeCounts* counts = nullptr) {
  std::stable_sort(records.begin(), records.end(),
                   [](const CheckinRecord& a, const CheckinRecord& b) {
                     return a.timestamp.epoch_seconds() < b.timestamp.epoch_seconds();
                   });
  std::vector<DailyTrajectory> out;
  SessionizeCounts local;
  SessionizeCounts& c = counts ? *counts : local;

  DailyTrajectory current;
  auto flush = [&] {
    if (current.visits.size() >= 2) {
      out.push_back(std::move(current));
    } else {
      c.dropped_singleton_day += current.visits.size();
      c.kept -= current.visits.size();
    }
    current = DailyTrajectory{};
  };

  for (const CheckinRecord& r : records) {
    const CivilDate date = r.timestamp.local_date();
    const std::string key = assign_location_key(r);
    if (coords_out && !coords_out->coordinates.count(key)) {
      coords_out->coordinates[key] = Coordinates{r.latitude, r.longitude};
    }
    if (!current.visits.empty() && current.date == date) {
      const Visit& last = current.visits.back();
      const bool same_place_bin =
          last.location_key == key && time_bin(last.timestamp) == time_bin(r.timestamp);
      const bool same_instant = last.timestamp.epoch_seconds() == r.timestamp.epoch_seconds();
      if (same_place_bin || same_instant) {
        ++c.collapsed;
        continue;
      }
    } else if (!current.visits.empty()) {
      flush();
    }
    if (current.visits.empty()) {
      current.user_id = r.user_id;
      current.date = date;
    }
    current.visits.push_back(Visit{key, categories.map(r.raw_category), r.timestamp});
    ++c.kept;
  }
  if (!current.visits.empty()) flush();
  return out;
}

/// Keeps users with at least three trajectories (each trajectory already has
/// at least two visits).
inline std::vector<UserHistory> filter_users(std::vector<UserHistory> histories) {
  std::vector<UserHistory> out;
  for (UserHistory& h : histories) {
    if (h.trajectories.size() >= 3) out.push_back(std::move(h));
  }
  return out;
}

/// Full ingest: per-user partition, sessionize, filter. Users come out sorted
/// by id; per-user trajectories sorted by date.
inline std::vector<UserHistory> build_histories(const std::vector<CheckinRecord>& records,
                                                const CategoryMap& categories,
                                                SessionizeCounts* counts = nullptr) {
  std::map<std::string, std::vector<CheckinRecord>> by_user;
  for (const CheckinRecord& r : records) by_user[r.user_id].push_back(r);
  std::vector<UserHistory> histories;
  for (auto& [user, recs] : by_user) {
    UserHistory h;
    h.user_id = user;
    h.trajectories = sessionize(std::move(recs), categories, &h, counts);
    histories.push_back(std::move(h));
  }
  return filter_users(std::move(histories));
}

// ----------------------------------------------------------------------------
// Trajectory store (line-oriented text, round-trips exactly)
// ----------------------------------------------------------------------------

inline std::string serialize_histories(const std::vector<UserHistory>& histories, int num_classes) {
  std::ostringstream out;
  out << "STTRAJ 1 " << num_classes << "\n";
  for (const UserHistory& h : histories) {
    out << "U " << h.user_id << " " << h.coordinates.size() << " " << h.trajectories.size() << "\n";
    for (const auto& [key, c] : h.coordinates) {
      out << "L " << key << " " << format_real(c.latitude) << " " << format_real(c.longitude)
          << "\n";
    }
    for (const DailyTrajectory& t : h.trajectories) {
      out << "T " << t.date.to_string() << " " << t.visits.size() << "\n";
      for (const Visit& v : t.visits) {
        out << "V " << v.location_key << " " << v.category << " " << v.timestamp.to_string()
            << "\n";
      }
    }
  }
  return out.str();
}

inline std::vector<UserHistory> deserialize_histories(const std::string& text,
                                                      int* num_classes = nullptr) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("trajectory store: empty file");
  auto head = split_ws(line);
  if (head.size() != 3 || head[0] != "STTRAJ" || head[1] != "1") {
    throw DataError("trajectory store: bad header");
  }
  if (num_classes) *num_classes = static_cast<int>(parse_int(head[2]));

  std::vector<UserHistory> out;
  UserHistory* user = nullptr;
  DailyTrajectory* traj = nullptr;
  while (std::getline(in, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "U") {
      if (tok.size() != 4) throw DataError("trajectory store: bad U line");
      out.push_back(UserHistory{tok[1], {}, {}});
      user = &out.back();
      traj = nullptr;
    } else if (tok[0] == "L") {
      if (!user || tok.size() != 4) throw DataError("trajectory store: bad L line");
      user->coordinates[tok[1]] = Coordinates{parse_real(tok[2]), parse_real(tok[3])};
    } else if (tok[0] == "T") {
      if (!user || tok.size() != 3) throw DataError("trajectory store: bad T line");
      auto d = split(tok[1], '-');
      if (d.size() != 3) throw DataError("trajectory store: bad date");
      user->trajectories.push_back(DailyTrajectory{
          user->user_id,
          CivilDate{static_cast<int>(parse_int(d[0])), static_cast<int>(parse_int(d[1])),
                    static_cast<int>(parse_int(d[2]))},
          {}});
      traj = &user->trajectories.back();
    } else if (tok[0] == "V") {
      if (!traj || tok.size() != 4) throw DataError("trajectory store: bad V line");
      traj->visits.push_back(
          Visit{tok[1], static_cast<int>(parse_int(tok[2])), parse_timestamp(tok[3])});
    } else {
      throw DataError("trajectory store: unknown record '" + tok[0] + "'");
    }
  }
  return out;
}

}  // namespace stgraph
