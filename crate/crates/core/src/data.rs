//! Datasets, synthetic generators and non-IID client partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, NONE};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the given samples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape is consistent"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for {} samples",
                self.len()
            )));
        }
        let (images, labels) = self.batch(indices);
        Dataset::new(images, labels, self.num_classes)
    }

    /// The first `per_class` samples of every class, in original order.
    pub fn take_per_class(&self, per_class: usize) -> Result<Dataset> {
        let mut taken = vec![0; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                taken[c] += 1;
                taken[c] <= per_class
            })
            .collect();
        self.subset(&idx)
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            missing: at + 4 - bytes.len(),
        })
}

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = read_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| read_u32(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            missing: need - have,
        });
    }
    Ok((dims, bytes[start..start + need].to_vec()))
}

/// Reads an uncompressed IDX image/label file pair (the MNIST family format).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path, IDX_IMAGES)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let images = Tensor::new(
        vec![idims[0], 1, idims[1], idims[2]],
        pixels.into_iter().map(|b| f64::from(b) / 255.0).collect(),
    )?;
    Dataset::new(images, labels, num_classes)
}

/// Train and test splits of FashionMNIST from a directory holding the four
/// standard (uncompressed) IDX files.
pub fn load_fashion_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Gaussian clusters around class means spread over the unit sphere in `dim`
/// dimensions. Samples are laid out as `[N, dim, 1, 1]`, class-major.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "synth_blobs needs positive counts".into(),
        ));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be a non-negative number, got {noise_sigma}"
        )));
    }
    let mut rng = rng::stream(seed, "blobs", NONE, NONE);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + noise_sigma * z);
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![num_classes * per_class, dim, 1, 1], data)?;
    Dataset::new(images, labels, num_classes)
}

#[derive(Clone, Copy)]
enum Glyph {
    HBar,
    VBar,
    Ring,
    Disk,
}

impl Glyph {
    /// Extent (rows, cols) before jitter.
    fn extent(self) -> (i32, i32) {
        match self {
            Glyph::HBar => (3, 10),
            Glyph::VBar => (10, 3),
            Glyph::Ring | Glyph::Disk => (9, 9),
        }
    }

    fn covers(self, dy: i32, dx: i32, h: i32, w: i32) -> bool {
        match self {
            Glyph::HBar | Glyph::VBar => true,
            Glyph::Ring => dy == 0 || dx == 0 || dy == h - 1 || dx == w - 1,
            Glyph::Disk => {
                let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
                let r = h.min(w) as f64 / 2.0;
                (dy as f64 - cy).powi(2) + (dx as f64 - cx).powi(2) <= r * r
            }
        }
    }
}

/// Pairs of glyphs and whether the second sits below (true) or right of
/// (false) the first. Classes come in pairs that swap the two glyphs, so
/// both members of a pair have the same local texture and differ only in
/// spatial arrangement.
const SHAPE_CLASSES: [(Glyph, Glyph, bool); 10] = [
    (Glyph::HBar, Glyph::VBar, true),
    (Glyph::VBar, Glyph::HBar, true),
    (Glyph::HBar, Glyph::VBar, false),
    (Glyph::VBar, Glyph::HBar, false),
    (Glyph::Ring, Glyph::Disk, true),
    (Glyph::Disk, Glyph::Ring, true),
    (Glyph::Ring, Glyph::Disk, false),
    (Glyph::Disk, Glyph::Ring, false),
    (Glyph::HBar, Glyph::Ring, true),
    (Glyph::Ring, Glyph::HBar, true),
];

/// Number of classes available from [`synth_shapes`].
pub const SHAPE_CLASS_COUNT: usize = SHAPE_CLASSES.len();

/// 28x28 single-channel images of two glyphs in a class-specific arrangement,
/// with random translation, glyph size, intensity and pixel noise.
///
/// Samples are interleaved by class (`label = i % num_classes`) and pixel
/// values lie in `[0, 1]`.
pub fn synth_shapes(num_classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > SHAPE_CLASS_COUNT || per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_shapes supports 1..={SHAPE_CLASS_COUNT} classes and a positive per-class count"
        )));
    }
    const S: i32 = 28;
    let n = num_classes * per_class;
    let mut data = vec![0.0; n * (S * S) as usize];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let mut rng = rng::stream(seed, "shapes", NONE, i as u64);
        let img = &mut data[i * (S * S) as usize..(i + 1) * (S * S) as usize];
        let (first, second, stacked) = SHAPE_CLASSES[label];
        let (h1, w1) = first.extent();
        let (h2, w2) = second.extent();
        let gap = rng.random_range(1..=3);
        let (bh, bw) = if stacked {
            (h1 + gap + h2, w1.max(w2))
        } else {
            (h1.max(h2), w1 + gap + w2)
        };
        let oy = (S - bh) / 2 + rng.random_range(-3..=3);
        let ox = (S - bw) / 2 + rng.random_range(-3..=3);
        let (p1, p2) = if stacked {
            ((oy, ox + (bw - w1) / 2), (oy + h1 + gap, ox + (bw - w2) / 2))
        } else {
            ((oy + (bh - h1) / 2, ox), (oy + (bh - h2) / 2, ox + w1 + gap))
        };
        for (glyph, (py, px), (h, w)) in [(first, p1, (h1, w1)), (second, p2, (h2, w2))] {
            let h = h + rng.random_range(-1..=1);
            let w = w + rng.random_range(-1..=1);
            let ink = rng.random_range(0.6..1.0);
            for dy in 0..h {
                for dx in 0..w {
                    let (y, x) = (py + dy, px + dx);
                    if (0..S).contains(&y) && (0..S).contains(&x) && glyph.covers(dy, dx, h, w) {
                        img[(y * S + x) as usize] = ink;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v + 0.1 * z).clamp(0.0, 1.0);
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, 1, S as usize, S as usize], data)?;
    Dataset::new(images, labels, num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    /// Dirichlet concentration; `None` for an IID split.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Per-client label histograms.
    pub fn histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0; num_classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            context: format!("serializing partition for {}", path.display()),
            source,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: format!("parsing partition {}", path.display()),
            source,
        })
    }
}

/// Splits `total` into integer shares proportional to `p` (which sums to 1),
/// handing leftover units to the largest fractional parts.
fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|x| x * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet split of sample indices across clients.
///
/// Each class's shuffled indices are divided according to a proportion
/// vector drawn from `Dir(alpha)` (Gamma normalization), rounded by largest
/// remainder. Clients left empty then take one sample from the currently
/// largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("n_clients must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if n_clients > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_clients} clients but only {} samples",
            labels.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut clients = vec![Vec::new(); n_clients];
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let mut rng = rng::stream(seed, "dirichlet", class as u64, NONE);
        idx.shuffle(&mut rng);
        let mut p: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = p.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            p.iter_mut().for_each(|x| *x /= sum);
        } else {
            // Every draw underflowed (tiny alpha): the whole class goes to one client.
            p.iter_mut().for_each(|x| *x = 0.0);
            p[rng.random_range(0..n_clients)] = 1.0;
        }
        let counts = largest_remainder(&p, idx.len());
        let mut at = 0;
        for (client, &c) in clients.iter_mut().zip(&counts) {
            client.extend_from_slice(&idx[at..at + c]);
            at += c;
        }
    }
    for i in 0..n_clients {
        if clients[i].is_empty() {
            let donor = (0..n_clients)
                .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
                .expect("at least one client");
            let moved = clients[donor].pop().expect("donor holds samples");
            clients[i].push(moved);
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition {
        client_indices: clients,
        alpha: Some(alpha),
        seed,
    })
}

/// Uniform random split of `n_samples` indices into `n_clients` shards whose
/// sizes differ by at most one.
pub fn iid_partition(n_samples: usize, n_clients: usize, seed: u64) -> Result<Partition> {
    if n_clients == 0 || n_clients > n_samples {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n_samples} samples across {n_clients} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut rng::stream(seed, "iid", NONE, NONE));
    let (base, extra) = (n_samples / n_clients, n_samples % n_clients);
    let mut at = 0;
    let client_indices = (0..n_clients)
        .map(|c| {
            let len = base + usize::from(c < extra);
            let mut shard = idx[at..at + len].to_vec();
            at += len;
            shard.sort_unstable();
            shard
        })
        .collect();
    Ok(Partition {
        client_indices,
        alpha: None,
        seed,
    })
}
