#include "cmdgoal/scene.hpp"

#include <cmath>

#include "cmdgoal/error.hpp"

namespace cmdgoal {

namespace {
constexpr std::array<std::string_view, kNumIntents> kIntentNames = {
    "Turn Left", "Turn Right", "Change Lane Left", "Change Lane Right", "U-Turn Left",
    "U-Turn Right", "Park", "Stop", "Pick Up", "Continue", "Overtake", "Drop Off",
    "Follow", "Slow Down", "Wait", "Approach", "Move Away", "Other",
};
}  // namespace

std::string_view to_string(IntentLabel i) noexcept { return kIntentNames[static_cast<int>(i)]; }

IntentLabel parse_intent(std::string_view label) {
  for (int i = 0; i < kNumIntents; ++i) {
    if (kIntentNames[i] == label) return static_cast<IntentLabel>(i);
  }
  throw SchemaError("unknown intent '" + std::string(label) + "'");
}

std::string_view to_string(SplitName s) noexcept {
  switch (s) {
    case SplitName::kTrain: return "train";
    case SplitName::kVal: return "val";
    case SplitName::kTest: return "test";
  }
  return "?";
}

SplitName parse_split(std::string_view name) {
  if (name == "train") return SplitName::kTrain;
  if (name == "val") return SplitName::kVal;
  if (name == "test") return SplitName::kTest;
  throw InvalidArgument("unknown split '" + std::string(name) + "'");
}

void validate(const SceneRecord& rec) {
  auto fail = [&](const std::string& what) { throw SchemaError("record '" + rec.id + "': " + what); };
  if (rec.id.empty()) fail("empty id");
  if (rec.command_embedding.size() != kCommandDim) {
    fail("command_embedding has " + std::to_string(rec.command_embedding.size()) +
         " entries, expected 768");
  }
  for (float v : rec.command_embedding) {
    if (!std::isfinite(v)) fail("non-finite command_embedding entry");
  }
  if (rec.destinations.empty() || rec.destinations.size() > kMaxDestinations) {
    fail("expected 1-3 destinations, got " + std::to_string(rec.destinations.size()));
  }
  for (const auto& d : rec.destinations) {
    if (!std::isfinite(d.x) || !std::isfinite(d.y) || !inside_map(d)) {
      fail("destination outside map extent");
    }
  }
  try {
    validate(rec.ego_box);
    for (const auto& o : rec.objects) validate(o.box);
  } catch (const InvalidArgument& e) {
    fail(e.what());
  }
  if (rec.referred_index && *rec.referred_index >= rec.objects.size()) {
    fail("referred_index out of range");
  }
  if (!rec.objects.empty()) {
    const std::size_t dim = rec.objects.front().features.size();
    for (const auto& o : rec.objects) {
      if (o.features.size() != dim) fail("inconsistent object feature dims");
    }
  }
  if (const auto* pr = std::get_if<ProceduralRoad>(&rec.road); pr && !(pr->width_m > 0.0)) {
    fail("procedural road width must be positive");
  }
}

}  // namespace cmdgoal
