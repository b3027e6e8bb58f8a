//! Profile text encoders.

use std::time::Duration;

use log::warn;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use super::llm::{ClientError, RetryPolicy};
use super::{ProfileError, UserProfile};
use crate::digest::seed_from_text;

pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// One vector of length `output_dim` per text, in input order.
    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ClientError>;
}

/// Unit vector drawn from a generator seeded by the text digest.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
}

impl MockEncoder {
    pub const ID: &'static str = "mock-encoder";

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim }
    }
}

impl TextEncoder for MockEncoder {
    fn id(&self) -> &str {
        Self::ID
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ClientError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_from_text(t));
                let v: Vec<f64> = (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect())
    }
}

/// OpenAI-compatible embeddings endpoint.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    /// Prepended to every text (e5-style models expect `"passage: "`).
    prefix: String,
}

impl HttpEmbeddingClient {
    pub const DEFAULT_MODEL: &'static str = "multilingual-e5-large";

    pub fn new(
        endpoint: &str,
        model: &str,
        api_key_env: Option<&str>,
        dim: usize,
        prefix: &str,
        timeout: Duration,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: api_key_env.and_then(|v| std::env::var(v).ok()),
            dim,
            prefix: prefix.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl TextEncoder for HttpEmbeddingClient {
    fn id(&self) -> &str {
        &self.model
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ClientError> {
        let input: Vec<String> = texts
            .iter()
            .map(|t| format!("{}{t}", self.prefix))
            .collect();
        let body = serde_json::json!({"model": self.model, "input": input});
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp: EmbeddingResponse = req
            .send_json(&body)
            .map_err(ClientError::from_ureq)?
            .body_mut()
            .read_json()
            .map_err(ClientError::from_ureq)?;
        if resp.data.len() != texts.len() {
            return Err(ClientError::Malformed(format!(
                "{} embeddings for {} texts",
                resp.data.len(),
                texts.len()
            )));
        }
        resp.data.sort_by_key(|r| r.index.unwrap_or(0));
        let rows: Vec<Vec<f64>> = resp.data.into_iter().map(|r| r.embedding).collect();
        if let Some(bad) = rows.iter().find(|r| r.len() != self.dim) {
            return Err(ClientError::Malformed(format!(
                "embedding of length {} (expected {})",
                bad.len(),
                self.dim
            )));
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone)]
pub struct EncodedProfiles {
    /// Users of the embedding rows, in input order minus failures.
    pub user_ids: Vec<String>,
    pub embeddings: Array2<f64>,
    pub failures: Vec<(String, String)>,
}

/// Encodes profiles in batches. A failing batch is retried one text at a
/// time so a single bad row is recorded as a skip without losing the rest.
pub fn encode_profiles(
    profiles: &[UserProfile],
    encoder: &dyn TextEncoder,
    batch_size: usize,
    retry: &RetryPolicy,
) -> Result<EncodedProfiles, ProfileError> {
    if profiles.is_empty() {
        return Err(ProfileError::NoProfiles);
    }
    let dim = encoder.output_dim();
    let mut user_ids = Vec::with_capacity(profiles.len());
    let mut data = Vec::with_capacity(profiles.len() * dim);
    let mut failures = Vec::new();
    let mut accept = |p: &UserProfile, row: Vec<f64>, failures: &mut Vec<(String, String)>| {
        if row.len() != dim || row.iter().any(|x| !x.is_finite()) {
            failures.push((
                p.user_id.clone(),
                "non-finite or mis-sized embedding".into(),
            ));
        } else {
            user_ids.push(p.user_id.clone());
            data.extend(row);
        }
    };
    for chunk in profiles.chunks(batch_size.max(1)) {
        let texts: Vec<&str> = chunk.iter().map(|p| p.text.as_str()).collect();
        match retry.run(|| encoder.encode(&texts)) {
            Ok(rows) => {
                for (p, row) in chunk.iter().zip(rows) {
                    accept(p, row, &mut failures);
                }
            }
            Err(e) => {
                warn!("batch encoding failed ({e}); encoding rows individually");
                for p in chunk {
                    match retry.run(|| encoder.encode(&[p.text.as_str()])) {
                        Ok(mut rows) if rows.len() == 1 => accept(p, rows.remove(0), &mut failures),
                        Ok(_) => {
                            failures.push((p.user_id.clone(), "encoder returned no row".into()))
                        }
                        Err(e) => failures.push((p.user_id.clone(), e.to_string())),
                    }
                }
            }
        }
    }
    let n = user_ids.len();
    Ok(EncodedProfiles {
        user_ids,
        embeddings: Array2::from_shape_vec((n, dim), data).expect("rows of length dim"),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(user: &str, text: &str) -> UserProfile {
        UserProfile {
            user_id: user.into(),
            text: text.into(),
            prompt_hash: "h".into(),
            generator_id: "g".into(),
        }
    }

    #[test]
    fn mock_is_deterministic_unit_length() {
        let e = MockEncoder::new(1024);
        let a = e.encode(&["one", "two", "one"]).unwrap();
        assert_eq!(a[0], a[2]);
        assert_ne!(a[0], a[1]);
        for r in &a {
            assert_eq!(r.len(), 1024);
            assert!((r.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let cos: f64 = a[0].iter().zip(&a[2]).map(|(x, y)| x * y).sum();
        assert!((cos - 1.0).abs() < 1e-12);
    }

    struct Picky;
    impl TextEncoder for Picky {
        fn id(&self) -> &str {
            "picky"
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ClientError> {
            if texts.contains(&"bad") {
                return Err(ClientError::Rejected {
                    status: 422,
                    message: "bad".into(),
                });
            }
            Ok(texts.iter().map(|t| vec![t.len() as f64, 1.0]).collect())
        }
    }

    #[test]
    fn failing_rows_are_skipped_in_order() {
        let ps = vec![
            profile("a", "x"),
            profile("b", "bad"),
            profile("c", "yyy"),
            profile("d", "zz"),
        ];
        let out = encode_profiles(&ps, &Picky, 3, &RetryPolicy::no_wait(1)).unwrap();
        assert_eq!(out.user_ids, ["a", "c", "d"]);
        assert_eq!(out.embeddings.column(0).to_vec(), [1.0, 3.0, 2.0]);
        assert_eq!(out.failures.len(), 1);
        assert!(matches!(
            encode_profiles(&[], &Picky, 3, &RetryPolicy::no_wait(1)),
            Err(ProfileError::NoProfiles)
        ));
    }
}
