//! Registry of the four prompt protocols and their rendering into
//! conversations.
//!
//! The texts live as external assets and are treated as frozen: tests pin
//! their hashes, and rendering never rewrites them. The simple protocol asks
//! an open question (turn 1, detection) and follows up for the type (turn 2,
//! classification); the engineered protocol uses a specialist framing and a
//! closed list of seven numbered options.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Conversation, Turn};
use crate::extraction::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    SimpleDetect,
    SimpleClassify,
    EngineeredDetect,
    EngineeredClassify,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::SimpleDetect,
        TemplateId::SimpleClassify,
        TemplateId::EngineeredDetect,
        TemplateId::EngineeredClassify,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TemplateId::SimpleDetect => "simple_detect",
            TemplateId::SimpleClassify => "simple_classify",
            TemplateId::EngineeredDetect => "engineered_detect",
            TemplateId::EngineeredClassify => "engineered_classify",
        }
    }

    /// Which question the template's final turn answers.
    pub fn task(&self) -> Task {
        match self {
            TemplateId::SimpleDetect | TemplateId::EngineeredDetect => Task::Detect,
            TemplateId::SimpleClassify | TemplateId::EngineeredClassify => Task::Classify,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| PromptError::UnknownTemplate {
                id: s.to_string(),
            })
    }
}

impl Serialize for TemplateId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TemplateId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template id {id:?}; legal ids are simple_detect, simple_classify, engineered_detect, engineered_classify")]
    UnknownTemplate { id: String },
    #[error(transparent)]
    Conversation(#[from] BackendError),
}

/// One turn of a protocol; the image rides on the first turn only.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnTemplate {
    pub text: String,
    pub wants_image: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub turns: Vec<TurnTemplate>,
}

/// Read-only template store, loaded once and shareable.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl PromptRegistry {
    /// The four protocols shipped with the crate.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        let mut add = |id: TemplateId, texts: &[&str]| {
            let turns = texts
                .iter()
                .enumerate()
                .map(|(i, text)| TurnTemplate {
                    text: text.trim().to_string(),
                    wants_image: i == 0,
                })
                .collect();
            templates.insert(id, PromptTemplate { id, turns });
        };
        add(
            TemplateId::SimpleDetect,
            &[include_str!("../assets/prompts/simple_detect.turn1.txt")],
        );
        add(
            TemplateId::SimpleClassify,
            &[
                include_str!("../assets/prompts/simple_classify.turn1.txt"),
                include_str!("../assets/prompts/simple_classify.turn2.txt"),
            ],
        );
        add(
            TemplateId::EngineeredDetect,
            &[include_str!("../assets/prompts/engineered_detect.turn1.txt")],
        );
        add(
            TemplateId::EngineeredClassify,
            &[
                include_str!("../assets/prompts/engineered_classify.turn1.txt"),
                include_str!("../assets/prompts/engineered_classify.turn2.txt"),
            ],
        );
        PromptRegistry { templates }
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    /// Lookup by name; unknown names list the legal ids.
    pub fn get_by_name(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        Ok(self.get(name.parse()?))
    }
}

/// Renders a template into a full conversation with the image attached to
/// the first turn and the registry text byte-identical.
pub fn render(template: &PromptTemplate, image: Vec<u8>) -> Result<Conversation, PromptError> {
    let mut image = Some(image);
    let turns = template
        .turns
        .iter()
        .map(|turn| match (turn.wants_image, image.take()) {
            (true, Some(bytes)) => Turn::with_image(turn.text.clone(), bytes),
            _ => Turn::text(turn.text.clone()),
        })
        .collect();
    Ok(Conversation::new(turns)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn registry() -> PromptRegistry {
        PromptRegistry::builtin()
    }

    #[test]
    fn simple_detect_is_the_exact_open_question() {
        let registry = registry();
        let template = registry.get(TemplateId::SimpleDetect);
        assert_eq!(template.turns.len(), 1);
        assert_eq!(template.turns[0].text, "What is this image?");
        assert!(template.turns[0].wants_image);
    }

    #[test]
    fn simple_classify_adds_the_follow_up() {
        let registry = registry();
        let template = registry.get(TemplateId::SimpleClassify);
        assert_eq!(template.turns.len(), 2);
        assert_eq!(template.turns[0].text, "What is this image?");
        assert_eq!(
            template.turns[1].text,
            "What is the pathology class of the polyp? Give me only one answer."
        );
        assert!(!template.turns[1].wants_image);
    }

    #[test]
    fn engineered_turns_have_the_pinned_openings() {
        let registry = registry();
        let detect = registry.get(TemplateId::EngineeredDetect);
        assert!(detect.turns[0]
            .text
            .starts_with("As an esteemed gastroenterologist specializing in colonoscopy evaluation"));
        let classify = registry.get(TemplateId::EngineeredClassify);
        assert_eq!(classify.turns[0].text, detect.turns[0].text);
        assert!(classify.turns[1]
            .text
            .starts_with("Analyze the provided image and select one of the following options"));
        for option in [
            "1. normal",
            "2. adenocarcinoma",
            "3. adenomatous-tubular polyp",
            "4. adenomatous-tubulovillous polyp",
            "5. adenomatous-villous polyp",
            "6. hyperplastic polyp",
            "7. inflammatory polyp.",
        ] {
            assert!(classify.turns[1].text.contains(option), "missing {option}");
        }
    }

    /// The registry texts are frozen; any edit to the assets must be a
    /// deliberate, hash-updating change.
    #[test]
    fn golden_hashes_are_stable() {
        let expected: [(&str, &[&str]); 4] = [
            (
                "simple_detect",
                &["d5e041b6874f431a999815868cdd95c2ad9991de9604251c6bb294ad77c7e2c5"],
            ),
            (
                "simple_classify",
                &[
                    "d5e041b6874f431a999815868cdd95c2ad9991de9604251c6bb294ad77c7e2c5",
                    "e7d5a493a54b957389d137eee9f53ffae3d70557950a70842fc04b6ff1267629",
                ],
            ),
            (
                "engineered_detect",
                &["8e966fb5ad1adc02796733527e34a6c6e7c32394b8d259215995d3a9c934731f"],
            ),
            (
                "engineered_classify",
                &[
                    "8e966fb5ad1adc02796733527e34a6c6e7c32394b8d259215995d3a9c934731f",
                    "a9b06f79951db6ef37db76b93623725c20ae29032f9d4b1f97626ffb7cc7da5a",
                ],
            ),
        ];
        let registry = registry();
        for (name, hashes) in expected {
            let template = registry.get_by_name(name).unwrap();
            assert_eq!(template.turns.len(), hashes.len(), "{name}");
            for (turn, hash) in template.turns.iter().zip(hashes) {
                assert_eq!(&hex::encode(Sha256::digest(turn.text.as_bytes())), hash, "{name}");
            }
        }
    }

    #[test]
    fn render_attaches_image_to_first_turn_only() {
        let registry = registry();
        let image = vec![1u8, 2, 3];
        let conversation = render(registry.get(TemplateId::EngineeredClassify), image.clone())
            .unwrap();
        assert_eq!(conversation.turns.len(), 2);
        assert_eq!(conversation.turns[0].image.as_deref(), Some(image.as_slice()));
        assert!(conversation.turns[1].image.is_none());
        assert!(conversation.turns[1].text.contains("6. hyperplastic polyp"));
    }

    #[test]
    fn rendered_text_is_byte_identical_to_registry() {
        let registry = registry();
        for id in TemplateId::ALL {
            let template = registry.get(id);
            let conversation = render(template, vec![0u8]).unwrap();
            for (turn, spec) in conversation.turns.iter().zip(&template.turns) {
                assert_eq!(turn.text, spec.text);
            }
        }
    }

    #[test]
    fn unknown_id_lists_legal_ids() {
        let err = registry().get_by_name("zero_shot_v2").unwrap_err();
        let message = err.to_string();
        for id in TemplateId::ALL {
            assert!(message.contains(id.name()), "{message}");
        }
    }

    #[test]
    fn template_task_association() {
        assert_eq!(TemplateId::SimpleDetect.task(), Task::Detect);
        assert_eq!(TemplateId::SimpleClassify.task(), Task::Classify);
        assert_eq!(TemplateId::EngineeredDetect.task(), Task::Detect);
        assert_eq!(TemplateId::EngineeredClassify.task(), Task::Classify);
    }
}
