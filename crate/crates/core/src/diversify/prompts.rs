//! Inference prompt catalog for subject-driven generation.
//!
//! Ids 1-48 apply to every class, 49-57 additionally to large land-based
//! machines and 58-67 to water-related machines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::Terrain;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferencePrompt {
    pub id: u32,
    pub description: String,
    /// Template with `{instance_name}` and `{class_name}` placeholders.
    pub template: String,
    pub terrain: Terrain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalog {
    prompts: Vec<InferencePrompt>,
}

pub const GENERAL_IDS: std::ops::RangeInclusive<u32> = 1..=48;
pub const LAND_IDS: std::ops::RangeInclusive<u32> = 49..=57;
pub const WATER_IDS: std::ops::RangeInclusive<u32> = 58..=67;

const S: &str = "<{instance_name}> {class_name}";

const BUILTIN: [(&str, &str); 67] = [
    ("plain", "a photo of a {S}"),
    ("construction site", "a photo of a {S} on a busy construction site"),
    ("city street", "a photo of a {S} parked on a city street"),
    ("highway", "a photo of a {S} working next to a highway"),
    ("forest", "a photo of a {S} in a forest clearing"),
    ("snow", "a photo of a {S} in deep snow"),
    ("rain", "a photo of a {S} working in heavy rain"),
    ("fog", "a photo of a {S} in dense fog"),
    ("night", "a photo of a {S} at night under floodlights"),
    ("sunset", "a photo of a {S} at sunset"),
    ("desert", "a photo of a {S} in a sandy desert"),
    ("mountain road", "a photo of a {S} on a mountain road"),
    ("industrial yard", "a photo of a {S} in an industrial yard"),
    ("warehouse", "a photo of a {S} in front of a warehouse"),
    ("farm", "a photo of a {S} on a farm field"),
    ("muddy ground", "a photo of a {S} on muddy ground"),
    ("gravel pit", "a photo of a {S} in a gravel pit"),
    ("bridge site", "a photo of a {S} at a bridge construction site"),
    ("tunnel entrance", "a photo of a {S} near a tunnel entrance"),
    ("railway", "a photo of a {S} next to a railway track"),
    ("demolition", "a photo of a {S} at a demolition site"),
    ("road works", "a photo of a {S} during road works"),
    ("residential area", "a photo of a {S} in a residential area"),
    ("parking lot", "a photo of a {S} in an empty parking lot"),
    ("exhibition", "a photo of a {S} at a trade exhibition"),
    ("workshop", "a photo of a {S} inside a maintenance workshop"),
    ("side view", "a side view photo of a {S}"),
    ("front view", "a front view photo of a {S}"),
    ("rear view", "a rear view photo of a {S}"),
    ("aerial view", "an aerial photo of a {S}"),
    ("low angle", "a low angle photo of a {S}"),
    ("far away", "a photo of a {S} seen from far away"),
    ("close up", "a close up photo of a {S}"),
    ("partially occluded", "a photo of a {S} partially hidden behind a fence"),
    ("with workers", "a photo of a {S} with construction workers nearby"),
    ("with trucks", "a photo of a {S} next to parked trucks"),
    ("multiple on site", "a photo of multiple machines, a {S} among other machines on a construction site"),
    ("multiple in yard", "a photo of multiple machines, several {S} units lined up in a yard"),
    ("multiple at depot", "a photo of multiple machines, a {S} at a crowded equipment depot"),
    ("dusty", "a photo of a dusty {S} in dry conditions"),
    ("clean", "a photo of a freshly cleaned {S}"),
    ("autumn", "a photo of a {S} surrounded by autumn leaves"),
    ("spring", "a photo of a {S} in spring with green trees"),
    ("overcast", "a photo of a {S} under an overcast sky"),
    ("bright noon", "a photo of a {S} in bright noon sunlight"),
    ("urban skyline", "a photo of a {S} with an urban skyline behind it"),
    ("hillside", "a photo of a {S} on a steep hillside"),
    ("loading", "a photo of a {S} during loading work"),
    ("open pit mine", "a photo of a {S} in an open pit mine"),
    ("quarry", "a photo of a {S} in a stone quarry"),
    ("haul road", "a photo of a {S} on a mine haul road"),
    ("coal mine", "a photo of a {S} at a surface coal mine"),
    ("mine benches", "a photo of a {S} on terraced mine benches"),
    ("ore pile", "a photo of a {S} next to a large ore pile"),
    ("multiple in mine", "a photo of multiple machines, a {S} working with other mining machines"),
    ("red dirt", "a photo of a {S} on red dirt in a mining area"),
    ("mine at dusk", "a photo of a {S} in a mine at dusk"),
    ("harbor", "a photo of a {S} in a harbor"),
    ("container terminal", "a photo of a {S} at a container terminal"),
    ("ship side", "a photo of a {S} next to a cargo ship"),
    ("river bank", "a photo of a {S} on a river bank"),
    ("swamp", "a photo of a {S} in a swamp"),
    ("offshore", "a photo of a {S} on an offshore platform"),
    ("pier", "a photo of a {S} on a pier"),
    ("canal", "a photo of a {S} working in a canal"),
    ("multiple at port", "a photo of multiple machines, a {S} among other machines at a busy port"),
    ("stormy sea", "a photo of a {S} near a stormy sea"),
];

impl PromptCatalog {
    pub fn builtin() -> Self {
        let prompts = BUILTIN
            .iter()
            .enumerate()
            .map(|(i, (desc, t))| {
                let id = i as u32 + 1;
                InferencePrompt { id, description: desc.to_string(), template: t.replace("{S}", S), terrain: terrain_of(id) }
            })
            .collect();
        PromptCatalog { prompts }
    }

    pub fn new(mut prompts: Vec<InferencePrompt>) -> Result<Self> {
        prompts.sort_by_key(|p| p.id);
        if let Some(w) = prompts.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidArgument(format!("duplicate prompt id {}", w[0].id)));
        }
        if let Some(p) = prompts.iter().find(|p| !p.template.contains("{class_name}")) {
            return Err(Error::InvalidArgument(format!("prompt {} has no {{class_name}} placeholder", p.id)));
        }
        Ok(PromptCatalog { prompts })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(crate::jsonl::read_json(path)?)
    }

    pub fn prompts(&self) -> &[InferencePrompt] {
        &self.prompts
    }

    pub fn get(&self, id: u32) -> Option<&InferencePrompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Prompts applicable to a class with the given terrain: every general
    /// prompt plus those tagged with the same terrain.
    pub fn applicable(&self, terrain: Terrain) -> impl Iterator<Item = &InferencePrompt> {
        self.prompts.iter().filter(move |p| p.terrain == Terrain::General || p.terrain == terrain)
    }
}

/// Terrain tag of a built-in prompt id.
pub fn terrain_of(id: u32) -> Terrain {
    if LAND_IDS.contains(&id) {
        Terrain::Land
    } else if WATER_IDS.contains(&id) {
        Terrain::Water
    } else {
        Terrain::General
    }
}
