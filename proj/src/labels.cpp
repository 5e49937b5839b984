#include "contactsense/labels.hpp"

#include "contactsense/error.hpp"

namespace contactsense {

std::optional<Label> parse_label(std::string_view s) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (kLabelNames[i] == s) return static_cast<Label>(i);
  }
  return std::nullopt;
}

Label label_from_index(int i) {
  if (i < 0 || i >= kNumClasses) throw ParameterError("class index out of range: " + std::to_string(i));
  return static_cast<Label>(i);
}

std::string_view to_string(Embodiment e) { return e == Embodiment::probe ? "probe" : "robot"; }

std::optional<Embodiment> parse_embodiment(std::string_view s) {
  if (s == "probe") return Embodiment::probe;
  if (s == "robot") return Embodiment::robot;
  return std::nullopt;
}

}  // namespace contactsense
