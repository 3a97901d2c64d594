// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <string_view>

namespace tspm {

enum class Modality { Audio, Visual, AudioVisual };
enum class Subtype { Existential, Counting, Location, Comparative, Temporal };

inline constexpr std::array<Modality, 3> kModalities = {Modality::Audio, Modality::Visual, Modality::AudioVisual};
inline constexpr std::array<Subtype, 5> kSubtypes = {Subtype::Existential, Subtype::Counting, Subtype::Location,
                                                     Subtype::Comparative, Subtype::Temporal};

std::string to_string(Modality m);
std::string to_string(Subtype s);

// Serialized as "<modality>/<subtype>", e.g. "audio-visual/location".
struct QuestionType {
  Modality modality = Modality::AudioVisual;
  Subtype subtype = Subtype::Existential;

  std::string to_string() const;
  static QuestionType parse(std::string_view text);
  bool operator==(const QuestionType&) const = default;
  auto operator<=>(const QuestionType&) const = default;
};

}  // namespace tspm
