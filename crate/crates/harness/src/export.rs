//! Distance and similarity matrices over a random sample of instances.

use hyperproto::episodes::sample_episode;
use hyperproto::numerics::{dot, norm};
use hyperproto::{Dataset, Encoder, Error, Prototype, Rng, Variant};

/// Instances drawn for a matrix export, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSample {
    /// Dataset class ids, ascending.
    pub classes: Vec<usize>,
    /// Embeddings, `n_per_class` consecutive rows per class.
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn sample_instances(
    encoder: &Encoder,
    ds: &Dataset,
    n_classes: usize,
    n_per_class: usize,
    rng: &mut Rng,
) -> hyperproto::Result<InstanceSample> {
    let ep = sample_episode(ds, n_classes, n_per_class, 0, rng)?;
    let mut embeddings = Vec::with_capacity(ep.support.len());
    let mut labels = Vec::with_capacity(ep.support.len());
    for (class, group) in ep.classes.iter().zip(ep.support_by_class()) {
        for x in &group {
            embeddings.push(encoder.embed(x)?);
            labels.push(*class);
        }
    }
    Ok(InstanceSample {
        classes: ep.classes,
        embeddings,
        labels,
    })
}

/// Min-max normalizes the whole matrix to `[0, 1]`; a constant matrix maps to zeros.
pub fn min_max_normalize(m: &mut [Vec<f64>]) {
    let (lo, hi) = m
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    for v in m.iter_mut().flatten() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// `(n_classes·n_per_class) × n_classes` measurements of every sampled
/// instance against prototypes built from the sample itself, normalized.
pub fn distance_matrix(sample: &InstanceSample, variant: Variant) -> hyperproto::Result<Vec<Vec<f64>>> {
    let protos = sample
        .classes
        .iter()
        .map(|c| {
            let group: Vec<Vec<f64>> = sample
                .embeddings
                .iter()
                .zip(&sample.labels)
                .filter(|(_, l)| *l == c)
                .map(|(e, _)| e.clone())
                .collect();
            Prototype::from_support(variant, &group)
        })
        .collect::<hyperproto::Result<Vec<_>>>()?;
    let mut m = sample
        .embeddings
        .iter()
        .map(|f| protos.iter().map(|p| p.measure(f).map(|r| r.value)).collect())
        .collect::<hyperproto::Result<Vec<Vec<f64>>>>()?;
    min_max_normalize(&mut m);
    Ok(m)
}

/// Cosine similarities between all sampled embeddings.
pub fn similarity_matrix(sample: &InstanceSample) -> hyperproto::Result<Vec<Vec<f64>>> {
    let norms: Vec<f64> = sample.embeddings.iter().map(|e| norm(e)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Contract(format!(
            "embedding of sampled instance {i} has zero norm"
        )));
    }
    let e = &sample.embeddings;
    Ok((0..e.len())
        .map(|i| {
            (0..e.len())
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        dot(&e[i], &e[j]) / (norms[i] * norms[j])
                    }
                })
                .collect()
        })
        .collect())
}

/// Class id followed by the embedding, one row per sampled instance.
pub fn embedding_rows(sample: &InstanceSample) -> Vec<Vec<f64>> {
    sample
        .labels
        .iter()
        .zip(&sample.embeddings)
        .map(|(&l, e)| std::iter::once(l as f64).chain(e.iter().copied()).collect())
        .collect()
}
