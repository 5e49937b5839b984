#include "contactsense/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "contactsense/error.hpp"

namespace contactsense {

using ordered_json = nlohmann::ordered_json;

void SegmentationParams::validate() const {
  std::vector<std::string> bad;
  if (!(alpha_offset >= 0.0 && alpha_offset <= 1.0)) bad.emplace_back("alpha_offset must lie in [0, 1]");
  if (!(beta_factor > 0.0 && beta_factor <= 1.0)) bad.emplace_back("beta_factor must lie in (0, 1]");
  if (!(delta_min_seconds > 0.0)) bad.emplace_back("delta_min_seconds must be positive");
  if (!(gamma_squeeze_seconds >= 0.0)) bad.emplace_back("gamma_squeeze_seconds must be non-negative");
  if (!(noise_percentile >= 0.0 && signal_percentile <= 100.0 && noise_percentile < signal_percentile)) {
    bad.emplace_back("noise_percentile must be below signal_percentile, both in [0, 100]");
  }
  if (!(min_ambient_seconds > 0.0)) bad.emplace_back("min_ambient_seconds must be positive");
  if (bad.empty()) return;
  std::string msg = "invalid segmentation params: ";
  for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
  throw ParameterError(msg);
}

std::string_view to_string(SegmentKind k) { return k == SegmentKind::contact ? "contact" : "ambient"; }

std::string_view to_string(ReviewState s) {
  switch (s) {
    case ReviewState::automatic: return "auto";
    case ReviewState::accepted: return "accepted";
    case ReviewState::rejected: return "rejected";
    case ReviewState::edited: return "edited";
  }
  return "auto";
}

std::optional<SegmentKind> parse_segment_kind(std::string_view s) {
  if (s == "contact") return SegmentKind::contact;
  if (s == "ambient") return SegmentKind::ambient;
  return std::nullopt;
}

std::optional<ReviewState> parse_review_state(std::string_view s) {
  if (s == "auto") return ReviewState::automatic;
  if (s == "accepted") return ReviewState::accepted;
  if (s == "rejected") return ReviewState::rejected;
  if (s == "edited") return ReviewState::edited;
  return std::nullopt;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ParameterError("percentile of an empty sequence");
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

Thresholds compute_thresholds(const Envelope& e, const SegmentationParams& p) {
  if (e.values.empty()) throw ParameterError("cannot compute thresholds of an empty envelope");
  Thresholds t;
  t.f_noise = percentile(e.values, p.noise_percentile);
  t.f_signal = percentile(e.values, p.signal_percentile);
  t.t_contact = t.f_noise + (t.f_signal - t.f_noise) * p.alpha_offset;
  t.t_noncontact = p.beta_factor * t.t_contact;
  return t;
}

BinaryMask classify_samples(const Envelope& e, const Thresholds& t) {
  BinaryMask mask(e.values.size());
  for (std::size_t k = 0; k < e.values.size(); ++k) mask[k] = e.values[k] > t.t_contact ? 1 : 0;
  return mask;
}

std::vector<ContactSegment> extract_segments(const BinaryMask& mask, double hop_seconds,
                                             const SegmentationParams& p, double start_offset_seconds) {
  if (!(hop_seconds > 0.0)) throw ParameterError("hop_seconds must be positive");
  auto time_of = [&](std::size_t k) { return start_offset_seconds + static_cast<double>(k) * hop_seconds; };

  std::vector<ContactSegment> merged;
  std::size_t k = 0;
  while (k < mask.size()) {
    if (!mask[k]) {
      ++k;
      continue;
    }
    std::size_t j = k;
    while (j < mask.size() && mask[j]) ++j;
    const double start = time_of(k), end = time_of(j);
    if (!merged.empty() && start - merged.back().end_seconds <= p.gamma_squeeze_seconds) {
      merged.back().end_seconds = end;
    } else {
      merged.push_back(ContactSegment{start, end, SegmentKind::contact, std::nullopt, ReviewState::automatic});
    }
    k = j;
  }

  std::vector<ContactSegment> out;
  for (auto& s : merged) {
    if (s.end_seconds - s.start_seconds >= p.delta_min_seconds) out.push_back(s);
  }
  return out;
}

std::vector<ContactSegment> mine_ambient(const Envelope& e, const Thresholds& t,
                                         const std::vector<ContactSegment>& contact, double min_ambient_seconds) {
  const std::size_t n = e.values.size();
  std::vector<std::uint8_t> eligible(n, 0);
  std::size_t c = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double lo = e.time_at(k), hi = e.time_at(k + 1);
    while (c < contact.size() && contact[c].end_seconds <= lo) ++c;
    bool overlaps = false;
    for (std::size_t i = c; i < contact.size() && contact[i].start_seconds < hi; ++i) {
      if (contact[i].end_seconds > lo) {
        overlaps = true;
        break;
      }
    }
    eligible[k] = !overlaps && e.values[k] <= t.t_noncontact;
  }

  std::vector<ContactSegment> out;
  std::size_t k = 0;
  while (k < n) {
    if (!eligible[k]) {
      ++k;
      continue;
    }
    std::size_t j = k;
    while (j < n && eligible[j]) ++j;
    const double start = e.time_at(k), end = e.time_at(j);
    if (end - start >= min_ambient_seconds) {
      out.push_back(ContactSegment{start, end, SegmentKind::ambient, Label::ambient, ReviewState::automatic});
    }
    k = j;
  }
  return out;
}

std::vector<ContactSegment> SegmentationResult::all_segments() const {
  std::vector<ContactSegment> all = contact;
  all.insert(all.end(), ambient.begin(), ambient.end());
  std::stable_sort(all.begin(), all.end(),
                   [](const ContactSegment& a, const ContactSegment& b) { return a.start_seconds < b.start_seconds; });
  return all;
}

SegmentationResult segment_trial(const Waveform& w, const SegmentationParams& p, const EnvelopeParams& ep) {
  p.validate();
  SegmentationResult r;
  r.envelope = smoothed_envelope(w, ep);
  r.thresholds = compute_thresholds(r.envelope, p);
  const BinaryMask mask = classify_samples(r.envelope, r.thresholds);
  r.contact = extract_segments(mask, r.envelope.hop_seconds, p, r.envelope.start_offset_seconds);
  r.ambient = mine_ambient(r.envelope, r.thresholds, r.contact, p.min_ambient_seconds);
  return r;
}

// --- JSON --------------------------------------------------------------

std::string to_json(const SegmentFile& f) {
  ordered_json doc;
  doc["trial_id"] = f.trial_id;
  doc["params"] = {
      {"alpha", f.params.alpha_offset},
      {"beta", f.params.beta_factor},
      {"delta_min", f.params.delta_min_seconds},
      {"gamma_squeeze", f.params.gamma_squeeze_seconds},
      {"percentiles", {f.params.noise_percentile, f.params.signal_percentile}},
      {"min_ambient", f.params.min_ambient_seconds},
      {"envelope", {{"window_s", f.envelope_params.window_seconds}, {"hop_s", f.envelope_params.hop_seconds}}},
  };
  doc["thresholds"] = {
      {"t_contact", f.thresholds.t_contact},
      {"t_noncontact", f.thresholds.t_noncontact},
      {"f_noise", f.thresholds.f_noise},
      {"f_signal", f.thresholds.f_signal},
  };
  auto segs = ordered_json::array();
  for (const auto& s : f.segments) {
    ordered_json js;
    js["start_s"] = s.start_seconds;
    js["end_s"] = s.end_seconds;
    js["kind"] = std::string(to_string(s.kind));
    js["label"] = s.label ? ordered_json(std::string(to_string(*s.label))) : ordered_json(nullptr);
    js["review_state"] = std::string(to_string(s.review_state));
    segs.push_back(std::move(js));
  }
  doc["segments"] = std::move(segs);
  return doc.dump(2) + "\n";
}

SegmentFile segment_file_from_json(const std::string& text) {
  SegmentFile f;
  try {
    const auto doc = nlohmann::json::parse(text);
    f.trial_id = doc.at("trial_id").get<std::string>();
    const auto& p = doc.at("params");
    f.params.alpha_offset = p.at("alpha").get<double>();
    f.params.beta_factor = p.at("beta").get<double>();
    f.params.delta_min_seconds = p.at("delta_min").get<double>();
    f.params.gamma_squeeze_seconds = p.at("gamma_squeeze").get<double>();
    f.params.noise_percentile = p.at("percentiles").at(0).get<double>();
    f.params.signal_percentile = p.at("percentiles").at(1).get<double>();
    if (p.contains("min_ambient")) f.params.min_ambient_seconds = p["min_ambient"].get<double>();
    if (p.contains("envelope")) {
      f.envelope_params.window_seconds = p["envelope"].at("window_s").get<double>();
      f.envelope_params.hop_seconds = p["envelope"].at("hop_s").get<double>();
    }
    const auto& t = doc.at("thresholds");
    f.thresholds.t_contact = t.at("t_contact").get<double>();
    f.thresholds.t_noncontact = t.at("t_noncontact").get<double>();
    f.thresholds.f_noise = t.at("f_noise").get<double>();
    f.thresholds.f_signal = t.at("f_signal").get<double>();
    for (const auto& js : doc.at("segments")) {
      ContactSegment s;
      s.start_seconds = js.at("start_s").get<double>();
      s.end_seconds = js.at("end_s").get<double>();
      auto kind = parse_segment_kind(js.at("kind").get<std::string>());
      if (!kind) throw FormatError("unknown segment kind");
      s.kind = *kind;
      if (js.contains("label") && !js["label"].is_null()) {
        auto l = parse_label(js["label"].get<std::string>());
        if (!l) throw FormatError("unknown label " + js["label"].get<std::string>());
        s.label = *l;
      }
      auto rs = parse_review_state(js.value("review_state", std::string("auto")));
      if (!rs) throw FormatError("unknown review_state");
      s.review_state = *rs;
      f.segments.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed segment file: ") + e.what());
  }
  return f;
}

std::string check_segment_invariants(const std::vector<ContactSegment>& segs, const SegmentationParams& p) {
  std::ostringstream msg;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const auto& s = segs[i];
    if (!(s.end_seconds > s.start_seconds)) {
      msg << "segment " << i << " has non-positive length";
      return msg.str();
    }
    if (s.kind == SegmentKind::contact && s.end_seconds - s.start_seconds < p.delta_min_seconds) {
      msg << "segment " << i << " is shorter than delta_min (" << s.end_seconds - s.start_seconds << " s)";
      return msg.str();
    }
    if (i > 0 && s.start_seconds < segs[i - 1].end_seconds) {
      msg << "segment " << i << " overlaps or precedes segment " << i - 1;
      return msg.str();
    }
  }
  return {};
}

}  // namespace contactsense
