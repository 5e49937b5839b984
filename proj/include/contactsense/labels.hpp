#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace contactsense {

// Class index order is fixed: it is the row/column order of every
// confusion matrix and the logit order of the classifier.
enum class Label { leaf = 0, twig = 1, trunk = 2, ambient = 3 };

inline constexpr int kNumClasses = 4;
inline constexpr std::array<std::string_view, kNumClasses> kLabelNames = {"leaf", "twig", "trunk", "ambient"};

inline std::string_view to_string(Label l) { return kLabelNames[static_cast<int>(l)]; }
inline int index_of(Label l) { return static_cast<int>(l); }

std::optional<Label> parse_label(std::string_view s);
Label label_from_index(int i);

enum class Embodiment { probe, robot };
std::string_view to_string(Embodiment e);
std::optional<Embodiment> parse_embodiment(std::string_view s);

}  // namespace contactsense
