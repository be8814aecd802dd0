#pragma once

#include <string_view>

namespace comprer {

enum class Modality { fundus, carotid };

/// Which view of a participant an embedding row comes from.
enum class View { visit_t, visit_t_prime, eye_right, eye_left, plain };

constexpr std::string_view modality_name(Modality m) { return m == Modality::fundus ? "fundus" : "carotid"; }

constexpr std::string_view view_name(View v) {
  switch (v) {
    case View::visit_t: return "visit_t";
    case View::visit_t_prime: return "visit_t_prime";
    case View::eye_right: return "eye_right";
    case View::eye_left: return "eye_left";
    case View::plain: return "plain";
  }
  return "plain";
}

}  // namespace comprer
