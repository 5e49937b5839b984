#include <doctest.h>

#include <cmath>

#include "contactsense/error.hpp"
#include "contactsense/segmentation.hpp"
#include "oracles.hpp"
#include "synth.hpp"

using namespace contactsense;

namespace {

Envelope from_values(std::vector<double> v, double hop = 0.01) {
  Envelope e;
  e.values = std::move(v);
  e.hop_seconds = hop;
  return e;
}

SegmentationParams loose() {
  SegmentationParams p;
  p.delta_min_seconds = 0.01;
  p.gamma_squeeze_seconds = 0.0;
  return p;
}

}  // namespace

TEST_CASE("percentile interpolates between closest ranks") {
  CHECK(percentile({3.0, 1.0, 2.0}, 50.0) == 2.0);
  CHECK(percentile({1.0, 2.0}, 25.0) == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(percentile({7.0}, 90.0) == 7.0);
  CHECK_THROWS_AS(percentile({}, 10.0), ParameterError);
  Rng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> v(1 + rng.below(300));
    for (auto& x : v) x = rng.normal();
    const double p = rng.uniform(0.0, 100.0);
    CHECK(percentile(v, p) == oracle::reference_percentile(v, p));
  }
}

TEST_CASE("ramp envelope gives the textbook thresholds") {
  std::vector<double> ramp(101);
  for (int k = 0; k <= 100; ++k) ramp[static_cast<std::size_t>(k)] = k / 100.0;
  SegmentationParams p;
  p.alpha_offset = 0.5;
  const auto t = compute_thresholds(from_values(ramp), p);
  CHECK(t.f_noise == 0.10);
  CHECK(t.f_signal == 0.90);
  CHECK(t.t_contact == 0.50);
  CHECK(t.t_noncontact == 0.75 * 0.50);
}

TEST_CASE("constant envelope has no contact under the strict comparison") {
  const auto e = from_values(std::vector<double>(500, 0.2));
  const auto t = compute_thresholds(e, loose());
  CHECK(t.t_contact == 0.2);
  const auto mask = classify_samples(e, t);
  CHECK(std::count(mask.begin(), mask.end(), 1) == 0);
  CHECK(extract_segments(mask, e.hop_seconds, loose()).empty());
}

TEST_CASE("gaps up to gamma merge, and duration is judged after merging") {
  SegmentationParams p;
  p.gamma_squeeze_seconds = 0.5;
  p.delta_min_seconds = 1.0;
  const double hop = 0.25;
  // runs [0,0.5) and [1.0,1.75): gap 0.5 merges into [0, 1.75)
  BinaryMask m = {1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0};
  auto segs = extract_segments(m, hop, p);
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].start_seconds == 0.0);
  CHECK(segs[0].end_seconds == 1.75);
  // gap of 0.75 keeps them apart, and neither part is long enough
  m = {1, 1, 0, 0, 0, 1, 1, 1, 0};
  CHECK(extract_segments(m, hop, p).empty());
  // exact duration boundary passes
  m = {0, 1, 1, 1, 1, 0};
  segs = extract_segments(m, hop, p);
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].duration() == 1.0);
  CHECK(segs[0].kind == SegmentKind::contact);
  CHECK_THROWS_AS(extract_segments(m, 0.0, p), ParameterError);
}

TEST_CASE("extract_segments agrees with the quadratic reference") {
  Rng rng(17);
  for (int rep = 0; rep < 300; ++rep) {
    const auto e = oracle::random_envelope(rng, 50 + rng.below(600), 0.01);
    const auto p = oracle::random_params(rng, e.hop_seconds);
    const double offset = rng.uniform() < 0.5 ? 0.0 : 0.025;
    const auto mask = classify_samples(e, compute_thresholds(e, p));
    REQUIRE(extract_segments(mask, e.hop_seconds, p, offset) == oracle::reference_segments(mask, e.hop_seconds, p, offset));
  }
}

TEST_CASE("coverage shrinks as alpha grows and scaling changes nothing") {
  Rng rng(29);
  for (int rep = 0; rep < 60; ++rep) {
    const auto e = oracle::random_envelope(rng, 400, 0.01);
    auto p = oracle::random_params(rng, e.hop_seconds);
    long prev = -1;
    for (int a = 0; a <= 10; ++a) {
      p.alpha_offset = a / 10.0;
      const auto segs = extract_segments(classify_samples(e, compute_thresholds(e, p)), e.hop_seconds, p);
      const long cov = oracle::coverage_frames(segs, e.hop_seconds);
      if (prev >= 0) CHECK(cov <= prev);
      prev = cov;
      for (double scale : {0.1, 10.0}) {
        Envelope s = e;
        for (auto& v : s.values) v *= scale;
        CHECK(extract_segments(classify_samples(s, compute_thresholds(s, p)), s.hop_seconds, p) == segs);
      }
    }
  }
}

TEST_CASE("ambient mining keeps quiet runs clear of contact") {
  std::vector<double> v(300, 0.01);
  for (int k = 100; k < 200; ++k) v[static_cast<std::size_t>(k)] = 1.0;
  v[250] = 0.9;  // a loud blip splits the trailing quiet stretch
  const auto e = from_values(v);
  SegmentationParams p;
  p.delta_min_seconds = 0.5;
  p.gamma_squeeze_seconds = 0.2;
  p.min_ambient_seconds = 0.45;
  const auto r_t = compute_thresholds(e, p);
  const auto contact = extract_segments(classify_samples(e, r_t), e.hop_seconds, p);
  REQUIRE(contact.size() == 1);
  const auto amb = mine_ambient(e, r_t, contact, p.min_ambient_seconds);
  REQUIRE(amb.size() == 3);
  CHECK(amb[0].start_seconds == 0.0);
  CHECK(amb[0].end_seconds == doctest::Approx(1.0));
  CHECK(amb[1].start_seconds == doctest::Approx(2.0));
  CHECK(amb[1].end_seconds == doctest::Approx(2.5));
  CHECK(amb[2].start_seconds == doctest::Approx(2.51));
  for (const auto& a : amb) {
    CHECK(a.kind == SegmentKind::ambient);
    CHECK(a.label == Label::ambient);
    CHECK((a.end_seconds <= contact[0].start_seconds || a.start_seconds >= contact[0].end_seconds));
  }
  // the 0.49 s run after the blip is too short
  CHECK(mine_ambient(e, r_t, contact, 0.5).size() == 2);
}

TEST_CASE("segment_trial finds synthetic contacts") {
  for (auto cls : {Label::leaf, Label::twig, Label::trunk}) {
    synth::TrialSpec spec;
    spec.cls = cls;
    const auto r = segment_trial(synth::trial_audio(spec), SegmentationParams{});
    REQUIRE(r.contact.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(std::abs(r.contact[i].start_seconds - spec.contacts[i].first) < 0.1);
      CHECK(std::abs(r.contact[i].end_seconds - spec.contacts[i].second) < 0.1);
    }
    CHECK(!r.ambient.empty());
    CHECK(check_segment_invariants(r.all_segments(), SegmentationParams{}).empty());
  }
}

TEST_CASE("segment files round-trip byte for byte") {
  synth::TrialSpec spec;
  SegmentFile f;
  f.trial_id = "t1";
  const auto r = segment_trial(synth::trial_audio(spec), f.params);
  f.thresholds = r.thresholds;
  f.segments = r.all_segments();
  f.segments[0].review_state = ReviewState::edited;
  f.segments[0].label = Label::twig;
  const std::string text = to_json(f);
  const auto back = segment_file_from_json(text);
  CHECK(to_json(back) == text);
  CHECK(back.segments == f.segments);
  CHECK_THROWS_AS(segment_file_from_json("{\"trial_id\": 3}"), FormatError);
  CHECK_THROWS_AS(segment_file_from_json("not json"), FormatError);
}

TEST_CASE("invariant checker and parameter validation name the problem") {
  SegmentationParams p;
  std::vector<ContactSegment> s = {{0.0, 1.5, SegmentKind::contact, {}, ReviewState::automatic},
                                   {1.4, 2.0, SegmentKind::ambient, Label::ambient, ReviewState::automatic}};
  CHECK(check_segment_invariants(s, p).find("overlaps") != std::string::npos);
  s[1].start_seconds = 1.5;
  CHECK(check_segment_invariants(s, p).empty());
  s[0].end_seconds = 0.5;
  CHECK(check_segment_invariants(s, p).find("delta_min") != std::string::npos);

  p.alpha_offset = 1.5;
  p.delta_min_seconds = -1.0;
  try {
    p.validate();
    FAIL("expected ParameterError");
  } catch (const ParameterError& e) {
    CHECK(std::string(e.what()).find("alpha_offset") != std::string::npos);
    CHECK(std::string(e.what()).find("delta_min_seconds") != std::string::npos);
  }
}
