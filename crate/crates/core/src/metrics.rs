//! Evaluation metrics: representation similarity, weight error and
//! hypernetwork footprint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::HyperNetSpec;
use crate::params::{manifest_for_shapes, LayerId, ParamSet, Precision};
use crate::tensor::{gemm, Tensor};

/// Flattens every sample of an `[N, ...]` tensor into a row of an `N x D`
/// matrix and subtracts the column means.
fn centered_rows(x: &Tensor) -> (usize, usize, Vec<f64>) {
    let n = x.shape()[0];
    let d = x.len() / n;
    let mut m = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| m[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            m[i * d + j] -= mean;
        }
    }
    (n, d, m)
}

fn gram(n: usize, d: usize, m: &[f64]) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    gemm(m, false, m, true, n, d, n, &mut k, false);
    k
}

/// Linear CKA between two representations of the same `N` samples.
///
/// Both inputs are `[N, ...]`; trailing dimensions are flattened and may
/// differ between `x` and `y`. Computed from centered Gram matrices, so the
/// cost is `O(N^2 D)` regardless of feature width. A representation that is
/// constant across samples has zero self-similarity and yields 0.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.ndim() < 2 || y.ndim() < 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::ShapeMismatch {
            layer: "linear_cka".into(),
            expected: x.shape().to_vec(),
            actual: y.shape().to_vec(),
        });
    }
    if x.shape()[0] < 2 {
        return Err(Error::InvalidArgument("CKA needs at least two samples".into()));
    }
    let (n, dx, mx) = centered_rows(x);
    let (_, dy, my) = centered_rows(y);
    let k = gram(n, dx, &mx);
    let l = gram(n, dy, &my);
    // Columns are already centered, so tr(K L) is the HSIC numerator.
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let kk = dot(&k, &k);
    let ll = dot(&l, &l);
    if kk <= 0.0 || ll <= 0.0 {
        return Ok(0.0);
    }
    Ok((dot(&k, &l) / (kk.sqrt() * ll.sqrt())).clamp(0.0, 1.0))
}

/// Mean absolute error between two tensors. With `normalize`, divided by
/// the mean absolute value of `truth`.
pub fn tensor_mae(truth: &Tensor, other: &Tensor, normalize: bool) -> Result<f64> {
    let diff = other.sub(truth)?;
    let mae = diff.data().iter().map(|v| v.abs()).sum::<f64>() / diff.len() as f64;
    if !normalize {
        return Ok(mae);
    }
    let scale = truth.data().iter().map(|v| v.abs()).sum::<f64>() / truth.len() as f64;
    if scale == 0.0 {
        return Err(Error::InvalidArgument("cannot normalize by an all-zero tensor".into()));
    }
    Ok(mae / scale)
}

/// Per-layer [`tensor_mae`] over every key of `other`, each of which must
/// also exist in `truth`.
pub fn weight_mae(truth: &ParamSet, other: &ParamSet, normalize: bool) -> Result<BTreeMap<LayerId, f64>> {
    let missing: Vec<String> = other
        .keys()
        .filter(|id| !truth.contains(id))
        .map(ToString::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    other
        .iter()
        .map(|(id, t)| Ok((*id, tensor_mae(truth.require(id)?, t, normalize)?)))
        .collect()
}

/// Mean of the per-layer values, weighting each layer by its element count.
pub fn pooled_mae(per_layer: &BTreeMap<LayerId, f64>, reference: &ParamSet) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (id, v) in per_layer {
        let len = reference.get(id).map_or(1, Tensor::len);
        sum += v * len as f64;
        n += len;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predicted.len(), labels.len(), "prediction/label count mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Storage cost of a set of hypernetworks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub param_count: usize,
    /// `param_count` times the element width.
    pub bytes: usize,
    /// Raw bytes plus the JSON manifest written alongside them.
    pub serialized_bytes: usize,
}

/// Analytic footprint; nothing is allocated beyond the manifest text.
pub fn hypernet_footprint(specs: &[HyperNetSpec], precision: Precision) -> Footprint {
    let shapes: Vec<_> = specs.iter().flat_map(HyperNetSpec::param_shapes).collect();
    let param_count = specs.iter().map(HyperNetSpec::param_count).sum::<usize>();
    let manifest = manifest_for_shapes(
        shapes.iter().map(|(id, s)| (*id, s.as_slice())),
        precision,
        "hypernets.bin",
    );
    let manifest_len = serde_json::to_string_pretty(&manifest)
        .expect("manifest serializes")
        .len();
    let bytes = param_count * precision.width();
    Footprint {
        param_count,
        bytes,
        serialized_bytes: bytes + manifest_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::Rank;
    use crate::multiexit::{Model, ModelSpec};
    use proptest::prelude::*;

    /// Textbook HSIC with an explicit centering matrix, O(N^2) loops.
    fn naive_cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let n = x.len();
        let kern = |a: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..n).map(|j| a[i].iter().zip(&a[j]).map(|(p, q)| p * q).sum()).collect())
                .collect()
        };
        let center = |k: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let h = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
            let mut hk = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    hk[i][j] = (0..n).map(|m| h(i, m) * k[m][j]).sum();
                }
            }
            let mut out = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    out[i][j] = (0..n).map(|m| hk[i][m] * h(m, j)).sum();
                }
            }
            out
        };
        let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
            (0..n).map(|i| (0..n).map(|j| a[i][j] * b[j][i]).sum::<f64>()).sum()
        };
        let k = center(kern(x));
        let l = center(kern(y));
        hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let d = t.len() / t.shape()[0];
        t.data().chunks(d).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn matches_numpy_reference() {
        // x[i][j] = sin(i + 2j), y[i][j] = cos(3i - j) + i/7, 6x3 and 6x4;
        // reference value from a float64 NumPy implementation.
        let x = Tensor::from_fn(&[6, 3], |f| ((f / 3 + 2 * (f % 3)) as f64).sin());
        let y = Tensor::from_fn(&[6, 4], |f| {
            let (i, j) = ((f / 4) as f64, (f % 4) as f64);
            (3.0 * i - j).cos() + i / 7.0
        });
        let v = linear_cka(&x, &y).unwrap();
        assert!((v - CKA_REFERENCE).abs() < 1e-12, "{v}");
    }

    const CKA_REFERENCE: f64 = 0.07071400920182247;

    #[test]
    fn self_similarity_is_one() {
        let x = Tensor::from_fn(&[10, 4, 2], |f| ((f * f + 3 * f) % 11) as f64);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_representation_scores_zero() {
        let x = Tensor::full(&[5, 3], 2.0);
        let y = Tensor::from_fn(&[5, 3], |f| (f / 3) as f64);
        assert_eq!(linear_cka(&x, &y).unwrap(), 0.0);
        assert!(linear_cka(&y, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn independent_gaussians_are_dissimilar() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::StreamRng::seed_from_u64(11);
        let mut draw = || Tensor::from_fn(&[1000, 16], |_| StandardNormal.sample(&mut rng));
        let (x, y) = (draw(), draw());
        assert!(linear_cka(&x, &y).unwrap() < 0.1);
    }

    fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn agrees_with_naive_oracle(x in matrix(7, 3), y in matrix(7, 5)) {
            let fast = linear_cka(&x, &y).unwrap();
            let slow = naive_cka(&rows(&x), &rows(&y));
            prop_assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
        }

        #[test]
        fn symmetric_and_bounded(x in matrix(8, 4), y in matrix(8, 2)) {
            let a = linear_cka(&x, &y).unwrap();
            let b = linear_cka(&y, &x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn invariant_to_scale_and_shift(x in matrix(8, 3), y in matrix(8, 3), s in 0.1f64..10.0, c in -5.0f64..5.0) {
            let base = linear_cka(&x, &y).unwrap();
            let moved = x.map(|v| s * v + c);
            prop_assert!((linear_cka(&moved, &y).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn invariant_to_orthogonal_rotation(x in matrix(8, 2), y in matrix(8, 3), theta in 0.0f64..6.28) {
            let base = linear_cka(&x, &y).unwrap();
            let (c, s) = (theta.cos(), theta.sin());
            let rot = Tensor::from_fn(&[8, 2], |f| {
                let (a, b) = (x.at2(f / 2, 0), x.at2(f / 2, 1));
                if f % 2 == 0 { c * a - s * b } else { s * a + c * b }
            });
            prop_assert!((linear_cka(&rot, &y).unwrap() - base).abs() < 1e-9);
        }
    }

    fn set(values: &[(&str, Vec<f64>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (k, v) in values {
            p.insert(k.parse().unwrap(), Tensor::new(vec![v.len()], v.clone()).unwrap());
        }
        p
    }

    #[test]
    fn mae_values() {
        let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![4], vec![1.5, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(tensor_mae(&a, &b, false).unwrap(), 0.375);
        assert_eq!(tensor_mae(&a, &b, true).unwrap(), 0.375 / 2.5);
        assert!(tensor_mae(&Tensor::zeros(&[4]), &a, true).is_err());
    }

    #[test]
    fn per_layer_mae() {
        let a = set(&[("seg1.0.conv_w", vec![1.0, -2.0]), ("seg1.0.conv_b", vec![0.5])]);
        let shifted = set(&[("seg1.0.conv_w", vec![1.5, -1.5]), ("seg1.0.conv_b", vec![1.0])]);
        for v in weight_mae(&a, &a, false).unwrap().values() {
            assert_eq!(*v, 0.0);
        }
        for v in weight_mae(&a, &shifted, false).unwrap().values() {
            assert_eq!(*v, 0.5);
        }
        let ten = |p: &ParamSet| {
            let mut q = p.clone();
            q.iter_mut().for_each(|(_, t)| *t = t.scale(10.0));
            q
        };
        let n1 = weight_mae(&a, &shifted, true).unwrap();
        let n10 = weight_mae(&ten(&a), &ten(&shifted), true).unwrap();
        for (k, v) in &n1 {
            assert!((v - n10[k]).abs() < 1e-15);
        }
        let extra = set(&[("seg2.0.conv_w", vec![0.0])]);
        match weight_mae(&a, &extra, false) {
            Err(Error::MissingKeys(k)) => assert_eq!(k, vec!["seg2.0.conv_w".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(pooled_mae(&weight_mae(&a, &shifted, false).unwrap(), &a), 0.5);
    }

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]), 0.75);
        assert_eq!(accuracy(&[], &[]), 0.0);
    }

    #[test]
    fn footprint_matches_serialized_artifact() {
        let model = Model::new(ModelSpec::conv_net([1, 8, 8], 3, &[2, 4, 6], &[1, 2], &[1, 2, 3]).unwrap()).unwrap();
        let nets = crate::hypernet::build_hypernets(&model, Rank::Top(2), 5, false, 0).unwrap();
        let specs: Vec<_> = nets.iter().map(|n| n.spec.clone()).collect();
        let fp = hypernet_footprint(&specs, Precision::F32);
        let mut all = ParamSet::new();
        for n in &nets {
            all.merge_from(&n.params);
        }
        assert_eq!(fp.param_count, all.numel());
        assert_eq!(fp.bytes, all.numel() * 4);
        assert_eq!(hypernet_footprint(&specs, Precision::F64).bytes, all.numel() * 8);
        let dir = tempfile::tempdir().unwrap();
        let manifest = all.save(dir.path(), "hypernets", Precision::F32).unwrap();
        let on_disk = std::fs::metadata(&manifest).unwrap().len() as usize
            + std::fs::metadata(dir.path().join("hypernets.bin")).unwrap().len() as usize;
        assert_eq!(fp.serialized_bytes, on_disk);
    }

    #[test]
    fn factor_mode_is_a_small_fraction_of_raw_on_the_reference_backbone() {
        let model = Model::new(ModelSpec::vgg_reference()).unwrap();
        let specs = |rank| -> Vec<HyperNetSpec> {
            (1..model.num_exits())
                .map(|t| HyperNetSpec::new(&model, t, rank, 256, false).unwrap())
                .collect()
        };
        let low = hypernet_footprint(&specs(Rank::Top(25)), Precision::F32);
        let full = hypernet_footprint(&specs(Rank::Full), Precision::F32);
        assert!((low.param_count as f64) / (full.param_count as f64) <= 0.013);
        assert!((low.serialized_bytes as f64) / (full.serialized_bytes as f64) <= 0.02);
    }

    #[test]
    fn wider_hidden_layers_cost_more() {
        let model = Model::new(ModelSpec::fmnist()).unwrap();
        let count = |h| HyperNetSpec::new(&model, 1, Rank::Top(25), h, false).unwrap().param_count();
        assert!(count(512) > count(256));
    }
}
