//! Metadata documents and the five-part profile prompt.

use serde::{Deserialize, Serialize};

use super::ProfileError;
use crate::data::{Catalog, MetaField, UserSequence};
use crate::digest::sha256_hex;

/// Placeholder expanded to the rating threshold when rendering.
pub const THRESHOLD_PLACEHOLDER: &str = "{threshold}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct PromptTemplate {
    domain_name: String,
    instruction_blocks: [String; 5],
    metadata_fields: Vec<MetaField>,
    rating_threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTemplate {
    domain_name: String,
    instruction_blocks: Vec<String>,
    metadata_fields: Vec<MetaField>,
    #[serde(default)]
    rating_threshold: Option<f64>,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = ProfileError;
    fn try_from(r: RawTemplate) -> Result<Self, ProfileError> {
        Self::new(
            r.domain_name,
            r.instruction_blocks,
            r.metadata_fields,
            r.rating_threshold,
        )
    }
}

impl From<PromptTemplate> for RawTemplate {
    fn from(t: PromptTemplate) -> Self {
        Self {
            domain_name: t.domain_name,
            instruction_blocks: t.instruction_blocks.into(),
            metadata_fields: t.metadata_fields,
            rating_threshold: t.rating_threshold,
        }
    }
}

impl PromptTemplate {
    /// Exactly five non-empty instruction blocks and at least one metadata
    /// field are required.
    pub fn new(
        domain_name: impl Into<String>,
        instruction_blocks: Vec<String>,
        metadata_fields: Vec<MetaField>,
        rating_threshold: Option<f64>,
    ) -> Result<Self, ProfileError> {
        let domain_name = domain_name.into();
        if domain_name.trim().is_empty() {
            return Err(ProfileError::Template("domain name is empty".into()));
        }
        let n = instruction_blocks.len();
        let blocks: [String; 5] = instruction_blocks.try_into().map_err(|_| {
            ProfileError::Template(format!("expected 5 instruction blocks, got {n}"))
        })?;
        if let Some(i) = blocks.iter().position(|b| b.trim().is_empty()) {
            return Err(ProfileError::Template(format!(
                "instruction block {} is empty",
                i + 1
            )));
        }
        if metadata_fields.is_empty() {
            return Err(ProfileError::Template("no metadata fields selected".into()));
        }
        if let Some(t) = rating_threshold {
            if !t.is_finite() {
                return Err(ProfileError::Template(format!(
                    "rating threshold {t} is not finite"
                )));
            }
        }
        Ok(Self {
            domain_name,
            instruction_blocks: blocks,
            metadata_fields,
            rating_threshold,
        })
    }

    /// Default blocks: history analysis (1-2), rating or frequency based
    /// likes and dislikes (3-4), and an overall characterization (5).
    pub fn standard(
        domain_name: impl Into<String>,
        metadata_fields: Vec<MetaField>,
        rating_threshold: Option<f64>,
    ) -> Result<Self, ProfileError> {
        let (liked, disliked) = match rating_threshold {
            Some(_) => (
                "Describe what the user's highly-rated items (rating at least {threshold}) have in common.",
                "Describe what the user's poorly-rated items (rating below {threshold}) have in common and what they suggest the user avoids.",
            ),
            None => (
                "Describe the kinds of items the user frequently interacted with.",
                "Describe the kinds of items the user rarely interacted with or abandoned.",
            ),
        };
        Self::new(
            domain_name,
            vec![
                "Analyze the user's interaction history and list the dominant themes, genres or categories.".into(),
                "Analyze how the user's interests changed over time, from the oldest to the most recent interactions.".into(),
                liked.into(),
                disliked.into(),
                "Synthesize an overall characterization of the user's preferences in a few sentences.".into(),
            ],
            metadata_fields,
            rating_threshold,
        )
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn instruction_blocks(&self) -> &[String; 5] {
        &self.instruction_blocks
    }

    pub fn metadata_fields(&self) -> &[MetaField] {
        &self.metadata_fields
    }

    pub fn rating_threshold(&self) -> Option<f64> {
        self.rating_threshold
    }

    /// Instruction blocks with the threshold placeholder expanded.
    pub fn expanded_blocks(&self) -> Vec<String> {
        let t = self
            .rating_threshold
            .map_or_else(|| "the user's typical rating".to_string(), format_number);
        self.instruction_blocks
            .iter()
            .map(|b| b.replace(THRESHOLD_PLACEHOLDER, &t))
            .collect()
    }
}

fn format_number(x: f64) -> String {
    format!("{x}")
}

/// One line per interaction in chronological order: the first present
/// field plain, the others in parentheses, then the rating if known, as in
/// `Heat (Action; Crime) — rating 5`. Items whose selected fields are all
/// missing fall back to their item id.
pub fn aggregate_metadata(
    sequence: &UserSequence,
    catalog: &Catalog,
    template: &PromptTemplate,
) -> Result<String, ProfileError> {
    if sequence.items.is_empty() {
        return Err(ProfileError::EmptyHistory(sequence.user_id.clone()));
    }
    let mut lines = Vec::with_capacity(sequence.items.len());
    for (t, &item) in sequence.items.iter().enumerate() {
        let meta = catalog
            .meta(item)
            .ok_or(ProfileError::MissingCatalogEntry(item))?;
        let fields: Vec<&str> = template
            .metadata_fields
            .iter()
            .filter_map(|&f| meta.field(f))
            .map(str::trim)
            .collect();
        let mut line = match fields.split_first() {
            Some((head, [])) => head.to_string(),
            Some((head, rest)) => format!("{head} ({})", rest.join("; ")),
            None => catalog.item_id(item).expect("indexed item").to_string(),
        };
        if let Some(r) = sequence.ratings.get(t).copied().flatten() {
            line.push_str(" — rating ");
            line.push_str(&format_number(r));
        }
        lines.push(line);
    }
    Ok(lines.join("\n"))
}

/// Header, history document, then the numbered instruction blocks.
pub fn render_prompt(document: &str, template: &PromptTemplate) -> String {
    let mut out = format!(
        "You are an expert analyst of user behaviour on a {} platform.\n\
         Below is one user's interaction history, oldest first.\n\n",
        template.domain_name
    );
    out.push_str(document.trim_end());
    out.push_str("\n\nWrite a comprehensive profile of this user. Address each point:\n");
    for (i, b) in template.expanded_blocks().iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, b));
    }
    out
}

pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InteractionRecord, ItemMeta};
    use std::collections::HashMap;

    fn movie(title: &str, genres: Option<&str>, description: Option<&str>) -> ItemMeta {
        ItemMeta {
            title: Some(title.into()),
            genres: genres.map(Into::into),
            description: description.map(Into::into),
            categories: None,
        }
    }

    fn catalog(n: usize) -> Catalog {
        let records: Vec<InteractionRecord> = (0..n)
            .map(|i| InteractionRecord::new("u", format!("m{i:03}"), i as u64, None).unwrap())
            .collect();
        let meta: HashMap<String, ItemMeta> = (0..n)
            .map(|i| {
                let desc = (i % 3 == 0).then(|| format!("story {i}"));
                (
                    format!("m{i:03}"),
                    movie(
                        &format!("Film {i}"),
                        Some(&format!("G{}", i % 4)),
                        desc.as_deref(),
                    ),
                )
            })
            .collect();
        Catalog::build(&records, &meta)
    }

    fn seq(items: Vec<usize>, ratings: Vec<Option<f64>>) -> UserSequence {
        UserSequence {
            user_id: "u".into(),
            timestamps: (0..items.len() as u64).collect(),
            items,
            ratings,
        }
    }

    fn fields() -> Vec<MetaField> {
        vec![MetaField::Title, MetaField::Genres, MetaField::Description]
    }

    #[test]
    fn two_movies_with_ratings() {
        let cat = catalog(2);
        let t = PromptTemplate::standard("movie", vec![MetaField::Title, MetaField::Genres], None)
            .unwrap();
        let doc =
            aggregate_metadata(&seq(vec![1, 2], vec![Some(5.0), Some(3.5)]), &cat, &t).unwrap();
        assert_eq!(doc, "Film 0 (G0) — rating 5\nFilm 1 (G1) — rating 3.5");
    }

    #[test]
    fn missing_fields_are_omitted() {
        let cat = catalog(3);
        let t = PromptTemplate::standard("movie", fields(), None).unwrap();
        let doc = aggregate_metadata(&seq(vec![2, 1], vec![None, None]), &cat, &t).unwrap();
        assert_eq!(doc, "Film 1 (G1)\nFilm 0 (G0; story 0)");
    }

    #[test]
    fn long_history_matches_concatenation_oracle() {
        let cat = catalog(40);
        let t = PromptTemplate::standard("movie", fields(), Some(4.0)).unwrap();
        let items: Vec<usize> = (0..30).map(|i| 1 + (i * 7) % 40).collect();
        let ratings: Vec<Option<f64>> = (0..30)
            .map(|i| (i % 2 == 0).then_some((i % 5) as f64))
            .collect();
        let doc = aggregate_metadata(&seq(items.clone(), ratings.clone()), &cat, &t).unwrap();
        let mut oracle = String::new();
        for (k, &it) in items.iter().enumerate() {
            let m = cat.meta(it).unwrap();
            let mut s = m.title.clone().unwrap();
            let mut extra = vec![m.genres.clone().unwrap()];
            if let Some(d) = &m.description {
                extra.push(d.clone());
            }
            s += &format!(" ({})", extra.join("; "));
            if let Some(r) = ratings[k] {
                s += &format!(" — rating {r}");
            }
            if k > 0 {
                oracle.push('\n');
            }
            oracle += &s;
        }
        assert_eq!(doc, oracle);
    }

    #[test]
    fn unknown_item_is_an_error() {
        let cat = catalog(2);
        let t = PromptTemplate::standard("movie", fields(), None).unwrap();
        assert!(matches!(
            aggregate_metadata(&seq(vec![1, 9], vec![None, None]), &cat, &t),
            Err(ProfileError::MissingCatalogEntry(9))
        ));
    }

    #[test]
    fn template_requires_five_non_empty_blocks() {
        let blocks = |n: usize| (0..n).map(|i| format!("b{i}")).collect::<Vec<_>>();
        assert!(PromptTemplate::new("x", blocks(4), fields(), None).is_err());
        let mut b = blocks(5);
        b[2] = "  ".into();
        assert!(PromptTemplate::new("x", b, fields(), None).is_err());
        assert!(PromptTemplate::new("x", blocks(5), fields(), None).is_ok());
    }

    #[test]
    fn render_is_deterministic_and_hash_stable() {
        let t = PromptTemplate::standard("movie", fields(), None).unwrap();
        let a = render_prompt("Film 0", &t);
        let b = render_prompt("Film 0", &t);
        assert_eq!(a, b);
        assert_eq!(prompt_hash(&a), prompt_hash(&b));
        assert_ne!(prompt_hash(&a), prompt_hash(&render_prompt("Film 1", &t)));
        assert!(a.contains("Film 0\n\n"));
        for i in 1..=5 {
            assert!(a.contains(&format!("\n{i}. ")));
        }
    }

    #[test]
    fn threshold_appears_in_block_four() {
        let t = PromptTemplate::standard("movie", fields(), Some(4.0)).unwrap();
        let p = render_prompt("doc", &t);
        let block4 = p.lines().find(|l| l.starts_with("4. ")).unwrap();
        let expected = format!(
            "4. {}",
            t.instruction_blocks()[3].replace(THRESHOLD_PLACEHOLDER, "4")
        );
        assert_eq!(block4, expected);
        assert!(block4.contains("below 4"));
        let plain = PromptTemplate::standard("movie", fields(), None).unwrap();
        let q = render_prompt("doc", &plain);
        assert!(q
            .lines()
            .any(|l| l.starts_with("3. ") && l.contains("frequently interacted")));
        assert!(q
            .lines()
            .any(|l| l.starts_with("4. ") && l.contains("rarely interacted")));
    }

    #[test]
    fn template_serde_validates() {
        let t = PromptTemplate::standard("movie", fields(), Some(3.5)).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<PromptTemplate>(&json).unwrap(), t);
        let broken = serde_json::json!({"domain_name": "x", "instruction_blocks": ["a"], "metadata_fields": ["title"]});
        assert!(serde_json::from_value::<PromptTemplate>(broken).is_err());
    }
}
