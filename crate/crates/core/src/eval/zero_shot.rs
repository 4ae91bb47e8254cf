use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::train::l2_normalize;
use crate::zoo::ModelGraph;

/// Class names, their prompt token rows, and the cached unit-norm class
/// embeddings `[K, D]` (template-averaged, then re-normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptSet<T: Scalar> {
    pub names: Vec<String>,
    /// `prompts[k]` holds one token row per template.
    pub prompts: Vec<Vec<Vec<usize>>>,
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> ClassPromptSet<T> {
    /// Encodes every prompt with `text` and averages per class.
    pub fn build(text: &ModelGraph<T>, names: Vec<String>, prompts: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if names.len() != prompts.len() {
            return Err(Error::Config(format!("{} class names for {} prompt sets", names.len(), prompts.len())));
        }
        if names.len() < 2 {
            return Err(Error::Config(format!("zero-shot needs at least 2 classes, got {}", names.len())));
        }
        let mut rows = Vec::new();
        for (name, p) in names.iter().zip(&prompts) {
            if p.is_empty() {
                return Err(Error::Config(format!("class {name:?} has no prompts")));
            }
            let ids: Vec<usize> = p.iter().flatten().copied().collect();
            let e = l2_normalize(&text.embed_text(&ids)?)?;
            let d = e.shape()[1];
            let mut mean = vec![0.0; d];
            for r in e.data().chunks(d) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v.as_f64() / p.len() as f64;
                }
            }
            rows.push(mean);
        }
        let d = rows[0].len();
        let flat: Vec<T> = rows.into_iter().flatten().map(T::of_f64).collect();
        let embeddings = l2_normalize(&Tensor::new(vec![names.len(), d], flat)?)?;
        Ok(ClassPromptSet {
            names,
            prompts,
            embeddings,
        })
    }

    /// Wraps precomputed class embeddings (rows are re-normalized).
    pub fn from_embeddings(names: Vec<String>, embeddings: &Tensor<T>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != names.len() {
            return Err(Error::dim(
                "ClassPromptSet",
                format!("{} names for embeddings {:?}", names.len(), embeddings.shape()),
            ));
        }
        if names.len() < 2 {
            return Err(Error::Config(format!("zero-shot needs at least 2 classes, got {}", names.len())));
        }
        Ok(ClassPromptSet {
            prompts: vec![Vec::new(); names.len()],
            names,
            embeddings: l2_normalize(embeddings)?,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// `[N, M]` cosine-similarity matrix of two row sets (rows normalized here).
pub fn similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::dim("similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (a, b) = (l2_normalize(a)?, l2_normalize(b)?);
    let d = a.shape()[1];
    Ok(a.data()
        .chunks(d)
        .map(|x| {
            b.data()
                .chunks(d)
                .map(|y| x.iter().zip(y).map(|(p, q)| p.as_f64() * q.as_f64()).sum())
                .collect()
        })
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn score(predictions: Vec<usize>, labels: &[usize], k: usize) -> Result<ZeroShot> {
    if labels.len() != predictions.len() {
        return Err(Error::dim("zero_shot_classify", format!("{} labels for {} images", labels.len(), predictions.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {l} outside {k} classes")));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 };
    Ok(ZeroShot { predictions, accuracy })
}

/// Zero-shot predictions from precomputed image embeddings `[N, D]`.
pub fn classify_embeddings<T: Scalar>(images: &Tensor<T>, prompts: &ClassPromptSet<T>, labels: &[usize]) -> Result<ZeroShot> {
    if prompts.len() < 2 {
        return Err(Error::Config(format!("zero-shot needs at least 2 classes, got {}", prompts.len())));
    }
    let sims = similarity(images, &prompts.embeddings)?;
    score(sims.iter().map(|r| argmax(r)).collect(), labels, prompts.len())
}

/// Encodes `images` with the image tower and predicts the most similar class.
pub fn zero_shot_classify<T: Scalar>(
    image: &ModelGraph<T>,
    prompts: &ClassPromptSet<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<ZeroShot> {
    if prompts.len() < 2 {
        return Err(Error::Config(format!("zero-shot needs at least 2 classes, got {}", prompts.len())));
    }
    classify_embeddings(&image.embed_images(images)?, prompts, labels)
}
