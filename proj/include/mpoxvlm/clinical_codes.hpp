#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "mpoxvlm/common.hpp"

namespace mpoxvlm {

// Controlled vocabularies for the clinical attribute codes. Codes 0..86 of
// the disease table are comparator diagnoses; mpox itself carries the
// distinguished code 87.

inline constexpr int kMpoxDiseaseId = 87;

inline constexpr std::array<std::string_view, 7> kFitzpatrickScale = {
    "Unknown",
    "Always burns, never tans (palest; freckles)",
    "Usually burns, tans minimally (light colored but darker than fair)",
    "Sometimes mild burn, tans uniformly (golden honey or olive)",
    "Burns minimally, always tans well (moderate brown)",
    "Very rarely burns, tans very easily (dark brown)",
    "Never burns (deeply pigmented dark brown to darkest brown)",
};

inline constexpr std::array<std::string_view, 12> kBodyParts = {
    "Unknown",
    "Hand/finger/wrist",
    "Foot/toe/ankle",
    "Arm",
    "Leg",
    "Chest/Abdomen/flank",
    "Back/Buttock",
    "Face",
    "Neck",
    "Genital and peri-genital",
    "Anal",
    "Scalp",
};

inline constexpr std::array<std::string_view, 88> kDiseases = {
    "Unknown",
    "Varicella (chickenpox)",
    "Herpes zoster (shingles)",
    "Measles",
    "Herpes - extra-genital",
    "Herpes - genital",
    "Syphilis primary or congenital",
    "Syphilis secondary",
    "Erythema Migrans",
    "Healed Scar",
    "Acne",
    "Molluscum",
    "Scabies",
    "Hives, urticaria",
    "Skin cancer",
    "Tularemia",
    "Blastomycosis",
    "Hand foot and mouth disease",
    "Impetigo or ecthyma",
    "Bed bug bites",
    "Other insect bites",
    "Genital warts (HPV)",
    "Furunculosis or early abscesses",
    "Folliculitis (standard bacterial)",
    "Miliaria",
    "Tuberculosis",
    "BCG vaccination",
    "Lymphangioma circumscriptum",
    "Spider bite",
    "Herpes gestationis",
    "Donovanosis",
    "Behcet's",
    "Leishmaniasis",
    "Chancroid",
    "Erythema multiforme",
    "Toxoplasmosis",
    "Histoplasmosis",
    "Rickettsia Akari",
    "Cryptococcus",
    "Degos",
    "Rickettsia parkeri",
    "Pityriasis rosea",
    "Psoriasis (guttate)",
    "Other folliculitis",
    "Other mycobacterial infections",
    "Bartonella",
    "PLEVA",
    "Other rickettsia or scrub typhus",
    "Melioidosis",
    "Lichen Planus",
    "Buruli Ulcer",
    "Talaromyces marneffei",
    "Coccidioidomycosis",
    "Paracoccidioidomycosis",
    "Sporotrichosis",
    "Fusarium",
    "Leukemic Cutis",
    "Eczema",
    "Roseola",
    "Perforating Dermatoses",
    "Disseminated Gonorrhea",
    "Dermatitis herpetiformis",
    "Prurigo Nodularis",
    "Nipple disorder",
    "Drug Eruption",
    "Bullous Pemphigoid",
    "Dermatofibroma",
    "Plain skin (no disease)",
    "Nipple (no disease)",
    "Genital skin (no disease)",
    "Anal area (no disease)",
    "Oral lips (no disease)",
    "Nose (no disease)",
    "Scalp with hair (no disease)",
    "Beard (no disease)",
    "Hemorrhoid",
    "Anal (no disease)",
    "Freckled skin (no disease)",
    "Mole (no disease)",
    "Pyogenic granuloma",
    "Janeway lesions",
    "Palm (no disease)",
    "Buttock (no disease)",
    "Teeth (no disease)",
    "Teeth (caries)",
    "Anthrax",
    "Malakoplakia",
    "Mpox",
};

// Nine-stage lesion progression; stored without asserting a canonical order.
inline constexpr std::array<std::string_view, 9> kLesionStages = {
    "macule",  "papule",   "vesicle", "pustule", "umbilicated pustule",
    "ulceration", "crusting", "scab",   "scar",
};

enum class AgeGroup : std::uint8_t { adult = 0, child = 1 };
enum class GenderPresentation : std::uint8_t { male = 0, female = 1, unknown = 2 };

inline std::string_view age_group_name(AgeGroup a) {
  return a == AgeGroup::adult ? "adult" : "child";
}

inline std::string_view gender_name(GenderPresentation g) {
  switch (g) {
    case GenderPresentation::male: return "male";
    case GenderPresentation::female: return "female";
    default: return "unknown";
  }
}

struct ClinicalAttributes {
  std::int64_t patient_id = 0;
  int fitzpatrick = 0;  // 0..6, 0 = unknown
  int body_part = 0;    // 0..11, 0 = unknown
  AgeGroup age_group = AgeGroup::adult;
  GenderPresentation gender = GenderPresentation::unknown;
  int disease_id = 0;   // 0..87, 0 = unknown (validation only), 87 = mpox
  int stage = -1;       // 0..8 when disease_id == kMpoxDiseaseId, else -1

  bool is_mpox() const { return disease_id == kMpoxDiseaseId; }

  void validate() const {
    require(patient_id >= 0, "patient_id must be >= 0");
    require(fitzpatrick >= 0 && fitzpatrick <= 6, "fitzpatrick code outside [0,6]");
    require(body_part >= 0 && body_part <= 11, "body_part code outside [0,11]");
    require(disease_id >= 0 && disease_id <= kMpoxDiseaseId,
            "disease_id code outside [0,87]");
    if (is_mpox()) {
      require(stage >= 0 && stage <= 8, "mpox sample requires stage in [0,8]");
    } else {
      require(stage == -1, "stage must be absent for non-mpox samples");
    }
  }
};

}  // namespace mpoxvlm
