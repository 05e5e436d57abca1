//! Prompt templates shared by generation, detection and review.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    ClassPrior,
    InstanceTrain,
    DetectOriginal,
    DetectSynonym,
    DetectCooccurring,
    ReviewSystem,
    ReviewUser,
    Photorealism,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub role: PromptRole,
    pub template: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

/// Splits a template into literal text and `{identifier}` slots. Braces that
/// do not enclose an identifier (for example a JSON example) are literal.
fn pieces(template: &str) -> Vec<Piece<'_>> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            let is_ident = j > i + 1 && !bytes[i + 1].is_ascii_digit();
            if is_ident && j < bytes.len() && bytes[j] == b'}' {
                if lit_start < i {
                    out.push(Piece::Text(&template[lit_start..i]));
                }
                out.push(Piece::Slot(&template[i + 1..j]));
                i = j + 1;
                lit_start = i;
                continue;
            }
        }
        i += 1;
    }
    if lit_start < bytes.len() {
        out.push(Piece::Text(&template[lit_start..]));
    }
    out
}

impl PromptTemplate {
    pub fn new(role: PromptRole, template: impl Into<String>) -> Self {
        PromptTemplate { role, template: template.into() }
    }

    /// Built-in template for a role.
    pub fn builtin(role: PromptRole) -> Self {
        let text = match role {
            PromptRole::ClassPrior => CLASS_PRIOR.to_string(),
            PromptRole::InstanceTrain => INSTANCE_TRAIN.to_string(),
            PromptRole::DetectOriginal => "{class_name}".to_string(),
            PromptRole::DetectSynonym => "{synonym}".to_string(),
            PromptRole::DetectCooccurring => "{names}".to_string(),
            PromptRole::ReviewSystem => REVIEW_SYSTEM.to_string(),
            PromptRole::ReviewUser => review_user_template(),
            PromptRole::Photorealism => PHOTOREALISM.to_string(),
        };
        PromptTemplate::new(role, text)
    }

    /// Names of every placeholder, in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for p in pieces(&self.template) {
            if let Piece::Slot(name) = p {
                if !seen.contains(&name) {
                    seen.push(name);
                }
            }
        }
        seen
    }

    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<String> {
        let mut out = String::with_capacity(self.template.len());
        for p in pieces(&self.template) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let value = bindings.get(name).ok_or_else(|| Error::MissingBinding(name.to_string()))?;
                    out.push_str(value);
                }
            }
        }
        if out.trim().is_empty() {
            return Err(Error::InvalidArgument(format!("{:?} template rendered to empty text", self.role)));
        }
        Ok(out)
    }
}

/// Convenience wrapper over [`PromptTemplate::render`].
pub fn render_prompt(template: &PromptTemplate, bindings: &BTreeMap<&str, &str>) -> Result<String> {
    template.render(bindings)
}

pub const CLASS_PRIOR: &str = "a photo of a {class_name}";
pub const INSTANCE_TRAIN: &str = "a photo of a <{instance_name}> {class_name}";

pub const REVIEW_SYSTEM: &str = "You are an AI bounding box annotation evaluator. Your task is to evaluate the correctness of bounding box annotations for given images and target objects. The bounding boxes are directly drawn as colored rectangles on top of the image. The class label is shown at the top-left corner of the corresponding bounding box. You will evaluate each bounding box annotation based on three criteria: precision, recall, and fit.";

pub const REVIEW_TASK: &str = "In this image, the target object for bounding box annotation is {target}. There may also be {secondary_target}. Each of the existing {target}s and {secondary_target}s should be annotated by a bounding box drawn as a colored rectangle. The goal is to accurately localize all {target}s and {secondary_target}s using these bounding boxes. Your task is to evaluate whether all bounding boxes are correct.";

pub const REVIEW_QUESTIONS: &str = "Correctness should be assessed in terms of precision, recall, and fit. Specifically, consider the following questions before making your judgment:
1. Does each bounding box perfectly enclose one single target object?
2. Are all target objects localized by a bounding box?
3. Is each bounding box neither too loose nor too tight?";

pub const REVIEW_OUTPUT: &str = "Please provide your evaluation in the following JSON format:
```json{
\"Precision\": \"Yes/No answer to question 1\",
\"Recall\": \"Yes/No answer to question 2\",
\"Fit\": \"Yes/No answer to question 3\"
}
Please think step-by-step and be sure to provide the correct answers. Very briefly explain yourself before answering the question.";

pub const REVIEW_RELAXATION: &str = "Before finalizing your evaluation, please consider the following suggestions:
1. For question 1 (Precision), if an object is occluded, the bounding box should be inferred based on a reasonable estimation of the object's size.
2. For question 2 (Recall), it's fairly normal to have only one object in the dataset.
3. For question 3 (Fit), don't be too harsh when bounding box edges just slightly cut off the object or just enclose a little bit of the outside area.";

pub const REVIEW_REMINDER: &str = "Always consider my suggestions before answering questions. But the suggestions are not strict rules. You can also use your own judgment. The most important thing is to answer the three questions correctly.";

pub const PHOTOREALISM: &str = "Is this image suitable as training data object detection for {target}? Answer YES or NO.
Does the main object in the image look like an authentic {target}? Answer YES or NO.";

/// Separator between the sections of the review user prompt.
pub const SECTION_SEPARATOR: &str = "\n\n";

pub fn review_user_template() -> String {
    [REVIEW_TASK, REVIEW_QUESTIONS, REVIEW_OUTPUT, REVIEW_RELAXATION, REVIEW_REMINDER].join(SECTION_SEPARATOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind<'a>(pairs: &[(&'a str, &'a str)]) -> BTreeMap<&'a str, &'a str> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn instance_prompt_wraps_identifier() {
        let t = PromptTemplate::builtin(PromptRole::InstanceTrain);
        let s = t.render(&bind(&[("instance_name", "TA230"), ("class_name", "articulated dump truck")])).unwrap();
        assert_eq!(s, "a photo of a <TA230> articulated dump truck");
    }

    #[test]
    fn class_prior_prompt() {
        let t = PromptTemplate::builtin(PromptRole::ClassPrior);
        let s = t.render(&bind(&[("class_name", "crawler crane")])).unwrap();
        assert_eq!(s, "a photo of a crawler crane");
    }

    #[test]
    fn missing_binding_is_an_error() {
        let t = PromptTemplate::builtin(PromptRole::InstanceTrain);
        let err = t.render(&bind(&[("instance_name", "TA230")])).unwrap_err();
        assert!(matches!(err, Error::MissingBinding(ref n) if n == "class_name"));
    }

    #[test]
    fn json_braces_are_literal() {
        let t = PromptTemplate::builtin(PromptRole::ReviewUser);
        assert_eq!(t.placeholders(), vec!["target", "secondary_target"]);
        let s = t.render(&bind(&[("target", "gantry crane"), ("secondary_target", "no secondary target")])).unwrap();
        assert!(s.contains("```json{\n\"Precision\""));
        assert!(!s.contains("{target}"));
    }

    #[test]
    fn empty_render_rejected() {
        let t = PromptTemplate::new(PromptRole::DetectOriginal, "{class_name}");
        assert!(t.render(&bind(&[("class_name", "  ")])).is_err());
    }
}
