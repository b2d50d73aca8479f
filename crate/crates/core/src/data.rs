//! Synthetic cardiac phantoms and segmentation metrics.
//!
//! A phantom is a short-axis-style scene on a [0,1] intensity canvas: an LV
//! disk, a Myo ring around it, and an RV crescent hugging the ring from the
//! left, over a noisy background with a linear intensity gradient. Multi mode
//! labels all four classes {0: background, 1: RV, 2: Myo, 3: LV}; single mode
//! keeps the same image but relabels the mask to LV-vs-background {0, 1}.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grad::{Graph, Tensor};
use crate::{Error, Result};

/// Smallest sensible canvas: below this the thin Myo ring aliases away.
pub const MIN_PHANTOM_SIZE: usize = 32;

const NOISE_SIGMA: f64 = 0.05;
const BASE_INTENSITY: [f64; 4] = [0.15, 0.45, 0.65, 0.85];

pub const METRICS_HEADER: &str =
    "iteration,epoch,lr,mr,train_loss,val_loss,dice_rv,dice_myo,dice_lv,dice_avg";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomMode {
    Single,
    Multi,
}

impl PhantomMode {
    pub fn num_classes(self) -> usize {
        match self {
            PhantomMode::Single => 2,
            PhantomMode::Multi => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhantomMode::Single => "single",
            PhantomMode::Multi => "multi",
        }
    }
}

impl fmt::Display for PhantomMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<PhantomMode> {
        match s {
            "single" => Ok(PhantomMode::Single),
            "multi" => Ok(PhantomMode::Multi),
            other => Err(Error::InvalidPhantomConfig(format!(
                "unknown mode {other:?}, expected single|multi"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    /// [1, H, W] intensities in [0, 1].
    pub image: Tensor,
    /// [H, W] class indices stored as integral f64.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PhantomSample>,
    /// Indices into `samples`, disjoint from `val_ids`.
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct Scene {
    cx: f64,
    cy: f64,
    r1: f64,
    r2: f64,
    // RV ellipse: center, semi-axes, rotation.
    ex: f64,
    ey: f64,
    ea: f64,
    eb: f64,
    theta: f64,
    grad_x: f64,
    grad_y: f64,
}

impl Scene {
    fn draw(rng: &mut ChaCha8Rng) -> Scene {
        let cx = rng.random_range(0.45..0.60);
        let cy = rng.random_range(0.40..0.60);
        let r1 = rng.random_range(0.10..0.16);
        let r2 = r1 + rng.random_range(0.06..0.10);
        let ea = rng.random_range(0.08..0.12);
        let eb = rng.random_range(0.05..0.09);
        let phi: f64 = rng.random_range(2.6..3.7); // roughly leftward of the ring
        let dist = r2 + 0.5 * ea;
        Scene {
            cx,
            cy,
            r1,
            r2,
            ex: cx + phi.cos() * dist,
            ey: cy + phi.sin() * dist,
            ea,
            eb,
            theta: rng.random_range(0.0..std::f64::consts::PI),
            grad_x: rng.random_range(-0.15..0.15),
            grad_y: rng.random_range(-0.15..0.15),
        }
    }

    /// Class at a normalized point, painted RV first so the ring and disk
    /// overwrite any overlap (that carves the crescent).
    fn class_at(&self, x: f64, y: f64) -> usize {
        let mut class = 0;
        let (dx, dy) = (x - self.ex, y - self.ey);
        let (sin, cos) = self.theta.sin_cos();
        let u = (cos * dx + sin * dy) / self.ea;
        let v = (cos * dy - sin * dx) / self.eb;
        if u * u + v * v <= 1.0 {
            class = 1;
        }
        let d2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        if d2 <= self.r2 * self.r2 {
            class = 2;
        }
        if d2 <= self.r1 * self.r1 {
            class = 3;
        }
        class
    }
}

/// Deterministic phantom dataset with a seeded 80/20 train/validation split.
pub fn generate_phantoms(
    count: usize,
    size: usize,
    seed: u64,
    mode: PhantomMode,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidPhantomConfig("count must be >= 1".into()));
    }
    if size < MIN_PHANTOM_SIZE || size % 2 != 0 {
        return Err(Error::InvalidPhantomConfig(format!(
            "size must be even and >= {MIN_PHANTOM_SIZE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("constant sigma is valid");
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let scene = Scene::draw(&mut rng);
        let mut image = vec![0.0; size * size];
        let mut mask = vec![0.0; size * size];
        for row in 0..size {
            let ny = (row as f64 + 0.5) / size as f64;
            for col in 0..size {
                let nx = (col as f64 + 0.5) / size as f64;
                let class = scene.class_at(nx, ny);
                let shade = BASE_INTENSITY[class]
                    + scene.grad_x * (nx - 0.5)
                    + scene.grad_y * (ny - 0.5)
                    + noise.sample(&mut rng);
                let at = row * size + col;
                image[at] = shade.clamp(0.0, 1.0);
                mask[at] = match mode {
                    PhantomMode::Multi => class as f64,
                    PhantomMode::Single => {
                        if class == 3 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
        samples.push(PhantomSample {
            image: Tensor::new(vec![1, size, size], image)?,
            mask: Tensor::new(vec![size, size], mask)?,
        });
    }

    let mut ids: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let cut = count * 8 / 10;
    let mut train_ids = ids[..cut].to_vec();
    let mut val_ids = ids[cut..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();

    Ok(Dataset {
        samples,
        train_ids,
        val_ids,
        num_classes: mode.num_classes(),
    })
}

/// Dice of one class between two integral masks: 2|A∩B| / (|A|+|B|), and 1.0
/// when the class is absent from both (a perfect prediction of nothing).
pub fn dice_index(pred: &Tensor, truth: &Tensor, class_id: usize) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_index",
            detail: format!("pred {:?} vs truth {:?}", pred.shape(), truth.shape()),
        });
    }
    let target = class_id as f64;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let in_pred = p == target;
        let in_truth = t == target;
        inter += (in_pred && in_truth) as usize;
        total += in_pred as usize + in_truth as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Dice for every foreground class 1..num_classes, in class order.
pub fn dice_foreground(pred: &Tensor, truth: &Tensor, num_classes: usize) -> Result<Vec<f64>> {
    (1..num_classes)
        .map(|c| dice_index(pred, truth, c))
        .collect()
}

/// Evaluation-only cross entropy: the module `grad` loss on an untracked
/// graph, so no gradients are recorded.
pub fn cross_entropy(logits: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.input(logits.clone());
    let loss = g.softmax_cross_entropy(z, mask)?;
    Ok(g.value(loss).data()[0])
}

/// Collapses [N, C, H, W] logits to an [N, H, W] class map; ties go to the
/// lowest class index.
pub fn argmax_mask(logits: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = logits.dims4("argmax_mask")?;
    let area = h * w;
    let data = logits.data();
    let mut out = vec![0.0; n * area];
    for s in 0..n {
        for p in 0..area {
            let mut best = 0;
            let mut best_v = data[s * c * area + p];
            for ch in 1..c {
                let v = data[(s * c + ch) * area + p];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            out[s * area + p] = best as f64;
        }
    }
    Tensor::new(vec![n, h, w], out)
}

/// Stacks samples into one [N, 1, H, W] image batch and [N, H, W] mask batch.
pub fn stack_batch(samples: &[&PhantomSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or(Error::ShapeMismatch {
        op: "stack_batch",
        detail: "empty batch".into(),
    })?;
    let (h, w) = match first.image.shape() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                detail: format!("image shape {other:?}, expected [1, H, W]"),
            })
        }
    };
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != [1, h, w] || s.mask.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                detail: format!(
                    "sample shapes {:?}/{:?} disagree with [1, {h}, {w}]",
                    s.image.shape(),
                    s.mask.shape()
                ),
            });
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::new(vec![samples.len(), 1, h, w], images)?,
        Tensor::new(vec![samples.len(), h, w], masks)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Foreground classes in order (entry 0 is class 1). Single-object runs
    /// carry one entry.
    pub dice_per_class: Vec<f64>,
    /// Mean over the active foreground classes.
    pub dice_avg: f64,
}

impl MetricRecord {
    fn csv_row(&self) -> String {
        // Absent classes are empty in both prediction and truth, which the
        // Dice convention scores as 1.
        let dice = |i: usize| self.dice_per_class.get(i).copied().unwrap_or(1.0);
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            self.lr,
            self.mr,
            self.train_loss,
            self.val_loss,
            dice(0),
            dice(1),
            dice(2),
            self.dice_avg
        )
    }
}

pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |e: std::io::Error| Error::io(format!("write {}", path.display()), e);
    writeln!(out, "{METRICS_HEADER}").map_err(write)?;
    for r in records {
        writeln!(out, "{}", r.csv_row()).map_err(write)?;
    }
    out.into_inner().map_err(|e| write(e.into_error()))?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io("create dataset dir", e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io("create dataset dir", e))?;
    for (i, s) in ds.samples.iter().enumerate() {
        s.image.save(&images.join(format!("{i:04}.tnsr")))?;
        s.mask.save(&masks.join(format!("{i:04}.tnsr")))?;
    }
    let mut index = String::new();
    for i in 0..ds.samples.len() {
        let split = if ds.train_ids.contains(&i) {
            "train"
        } else {
            "val"
        };
        index.push_str(&format!("{i:04},{split}\n"));
    }
    fs::write(dir.join("index.txt"), index).map_err(|e| Error::io("write dataset index", e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.txt");
    let bad = |detail: String| Error::DatasetFormat {
        path: index_path.clone(),
        detail,
    };
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io("read dataset index", e))?;

    let mut samples = Vec::new();
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut max_class = 1.0f64;
    for (lineno, line) in text.lines().enumerate() {
        let (id, split) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("line {}: expected 'id,split'", lineno + 1)))?;
        let image = Tensor::load(&dir.join("images").join(format!("{id}.tnsr")))?;
        let mask = Tensor::load(&dir.join("masks").join(format!("{id}.tnsr")))?;
        let (h, w) = match image.shape() {
            [1, h, w] => (*h, *w),
            other => {
                return Err(bad(format!(
                    "sample {id}: image shape {other:?}, expected [1, H, W]"
                )))
            }
        };
        if mask.shape() != [h, w] {
            return Err(bad(format!(
                "sample {id}: mask shape {:?} does not match image [{h}, {w}]",
                mask.shape()
            )));
        }
        if let Some(&v) = mask
            .data()
            .iter()
            .find(|v| v.fract() != 0.0 || **v < 0.0)
        {
            return Err(bad(format!("sample {id}: non-integral mask value {v}")));
        }
        max_class = mask.data().iter().fold(max_class, |m, &v| m.max(v));
        match split {
            "train" => train_ids.push(samples.len()),
            "val" => val_ids.push(samples.len()),
            other => return Err(bad(format!("line {}: unknown split {other:?}", lineno + 1))),
        }
        samples.push(PhantomSample { image, mask });
    }
    if samples.is_empty() {
        return Err(bad("dataset index lists no samples".into()));
    }
    Ok(Dataset {
        samples,
        train_ids,
        val_ids,
        num_classes: max_class as usize + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantoms(10, 64, 7, PhantomMode::Multi).unwrap();
        let b = generate_phantoms(10, 64, 7, PhantomMode::Multi).unwrap();
        assert_eq!(a, b);
        let c = generate_phantoms(10, 64, 8, PhantomMode::Multi).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_is_80_20_and_disjoint() {
        let ds = generate_phantoms(10, 32, 3, PhantomMode::Multi).unwrap();
        assert_eq!(ds.train_ids.len(), 8);
        assert_eq!(ds.val_ids.len(), 2);
        let mut all: Vec<usize> = ds.train_ids.iter().chain(&ds.val_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn most_multi_samples_contain_all_classes() {
        let ds = generate_phantoms(1000, 32, 42, PhantomMode::Multi).unwrap();
        let full = ds
            .samples
            .iter()
            .filter(|s| {
                let mut seen = [false; 4];
                for &v in s.mask.data() {
                    seen[v as usize] = true;
                }
                seen.iter().all(|&b| b)
            })
            .count();
        assert!(full >= 900, "only {full} of 1000 samples have all classes");
    }

    #[test]
    fn myo_ring_wraps_the_lv_disk() {
        let ds = generate_phantoms(50, 64, 11, PhantomMode::Multi).unwrap();
        for (i, s) in ds.samples.iter().enumerate() {
            let m = s.mask.data();
            let size = 64usize;
            for row in 0..size {
                for col in 0..size {
                    if m[row * size + col] != 3.0 {
                        continue;
                    }
                    for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (r, c) = (row as i64 + dr, col as i64 + dc);
                        assert!(
                            (0..size as i64).contains(&r) && (0..size as i64).contains(&c),
                            "sample {i}: LV touches the border"
                        );
                        let v = m[r as usize * size + c as usize];
                        assert!(
                            v == 3.0 || v == 2.0,
                            "sample {i}: LV neighbor has class {v}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_mode_uses_two_classes() {
        let ds = generate_phantoms(20, 32, 5, PhantomMode::Single).unwrap();
        assert_eq!(ds.num_classes, 2);
        let mut saw_fg = false;
        for s in &ds.samples {
            for &v in s.mask.data() {
                assert!(v == 0.0 || v == 1.0, "{v}");
                saw_fg |= v == 1.0;
            }
        }
        assert!(saw_fg);
    }

    #[test]
    fn images_stay_in_unit_range() {
        let ds = generate_phantoms(20, 32, 9, PhantomMode::Multi).unwrap();
        for s in &ds.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generator_rejects_bad_config() {
        assert!(generate_phantoms(0, 32, 1, PhantomMode::Multi).is_err());
        assert!(generate_phantoms(5, 30, 1, PhantomMode::Multi).is_err());
        assert!(generate_phantoms(5, 33, 1, PhantomMode::Multi).is_err());
    }

    #[test]
    fn dice_hand_cases() {
        let full = Tensor::new(vec![10, 10], vec![1.0; 100]).unwrap();
        assert_eq!(dice_index(&full, &full, 1).unwrap(), 1.0);

        let empty = Tensor::zeros(vec![10, 10]);
        assert_eq!(dice_index(&empty, &full, 1).unwrap(), 0.0);
        assert_eq!(dice_index(&empty, &empty, 1).unwrap(), 1.0);

        // Pred covers exactly half of a 100-pixel region, no false positives.
        let mut truth = vec![0.0; 200];
        truth[..100].fill(1.0);
        let mut pred = vec![0.0; 200];
        pred[..50].fill(1.0);
        let truth = Tensor::new(vec![200], truth).unwrap();
        let pred = Tensor::new(vec![200], pred).unwrap();
        assert_eq!(dice_index(&pred, &truth, 1).unwrap(), 2.0 / 3.0);

        let short = Tensor::zeros(vec![7]);
        assert!(dice_index(&short, &truth, 1).is_err());
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(
            a in proptest::collection::vec(0..4u8, 64),
            b in proptest::collection::vec(0..4u8, 64),
            class in 0..4usize,
        ) {
            let ta = Tensor::new(vec![8, 8], a.iter().map(|&v| v as f64).collect()).unwrap();
            let tb = Tensor::new(vec![8, 8], b.iter().map(|&v| v as f64).collect()).unwrap();
            let ab = dice_index(&ta, &tb, class).unwrap();
            let ba = dice_index(&tb, &ta, class).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
        }

        #[test]
        fn correcting_a_pixel_never_lowers_dice(
            mut pred in proptest::collection::vec(0..4u8, 64),
            truth in proptest::collection::vec(0..4u8, 64),
            pick in 0..64usize,
        ) {
            let class = truth[pick];
            let tt = Tensor::new(vec![64], truth.iter().map(|&v| v as f64).collect()).unwrap();
            let before = {
                let tp = Tensor::new(vec![64], pred.iter().map(|&v| v as f64).collect()).unwrap();
                dice_index(&tp, &tt, class as usize).unwrap()
            };
            pred[pick] = class;
            let after = {
                let tp = Tensor::new(vec![64], pred.iter().map(|&v| v as f64).collect()).unwrap();
                dice_index(&tp, &tt, class as usize).unwrap()
            };
            prop_assert!(after >= before, "{after} < {before}");
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mask = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let uniform = Tensor::zeros(vec![1, 4, 2, 2]);
        assert_relative_eq!(
            cross_entropy(&uniform, &mask).unwrap(),
            4.0f64.ln(),
            max_relative = 1e-12
        );

        // Large-margin one-hot logits drive the loss to zero.
        let mut data = vec![0.0; 16];
        for p in 0..4 {
            let class = mask.data()[p] as usize;
            data[class * 4 + p] = 30.0;
        }
        let sharp = Tensor::new(vec![1, 4, 2, 2], data).unwrap();
        assert!(cross_entropy(&sharp, &mask).unwrap() < 1e-9);
    }

    #[test]
    fn permuting_classes_raises_the_loss() {
        let ds = generate_phantoms(3, 32, 13, PhantomMode::Multi).unwrap();
        for s in &ds.samples {
            let area = 32 * 32;
            let mut correct = vec![0.0; 4 * area];
            for p in 0..area {
                correct[s.mask.data()[p] as usize * area + p] = 3.0;
            }
            // Swap the RV and Myo channels.
            let mut permuted = correct.clone();
            permuted.copy_within(area..2 * area, 3 * area);
            let tail = permuted[3 * area..].to_vec();
            permuted[2 * area..3 * area].clone_from_slice(&correct[area..2 * area]);
            permuted[area..2 * area].clone_from_slice(&correct[2 * area..3 * area]);
            permuted[3 * area..].clone_from_slice(&tail);
            let mask3 = Tensor::new(vec![1, 32, 32], s.mask.data().to_vec()).unwrap();
            let good = cross_entropy(
                &Tensor::new(vec![1, 4, 32, 32], correct).unwrap(),
                &mask3,
            )
            .unwrap();
            let bad = cross_entropy(
                &Tensor::new(vec![1, 4, 32, 32], permuted).unwrap(),
                &mask3,
            )
            .unwrap();
            assert!(bad > good + 0.1, "bad {bad} good {good}");
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_class() {
        let logits = Tensor::new(
            vec![1, 3, 1, 2],
            vec![
                1.0, 5.0, // class 0
                1.0, 7.0, // class 1
                0.5, 7.0, // class 2
            ],
        )
        .unwrap();
        let m = argmax_mask(&logits).unwrap();
        assert_eq!(m.shape(), [1, 1, 2]);
        assert_eq!(m.data(), [0.0, 1.0]);
    }

    #[test]
    fn batches_stack_in_order() {
        let ds = generate_phantoms(4, 32, 2, PhantomMode::Multi).unwrap();
        let refs: Vec<&PhantomSample> = ds.samples.iter().take(3).collect();
        let (images, masks) = stack_batch(&refs).unwrap();
        assert_eq!(images.shape(), [3, 1, 32, 32]);
        assert_eq!(masks.shape(), [3, 32, 32]);
        assert_eq!(&images.data()[1024..2048], ds.samples[1].image.data());
        assert_eq!(&masks.data()[..1024], ds.samples[0].mask.data());
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_phantoms(7, 32, 21, PhantomMode::Multi).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_dataset_reports_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_phantoms(3, 32, 4, PhantomMode::Multi).unwrap();
        save_dataset(&ds, dir.path()).unwrap();

        // Truncate one image payload.
        let victim = dir.path().join("images/0001.tnsr");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.kind(), "tensor_format");

        fs::write(&victim, bytes).unwrap();
        fs::write(dir.path().join("index.txt"), "0001 train\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.kind(), "dataset_format");
    }

    #[test]
    fn metrics_csv_layout_is_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let records = vec![
            MetricRecord {
                iteration: 0,
                epoch: 0,
                lr: 0.0005,
                mr: 0.85,
                train_loss: 1.5,
                val_loss: 1.25,
                dice_per_class: vec![0.5, 0.25, 0.75],
                dice_avg: 0.5,
            },
            MetricRecord {
                iteration: 169,
                epoch: 1,
                lr: 0.02525,
                mr: 0.9,
                train_loss: 0.5,
                val_loss: 0.375,
                dice_per_class: vec![0.5],
                dice_avg: 0.5,
            },
        ];
        write_metrics_csv(&records, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,0,0.0005,0.85,1.5,1.25,0.5,0.25,0.75,0.5");
        // Absent foreground classes score as empty-empty Dice.
        assert_eq!(lines[2], "169,1,0.02525,0.9,0.5,0.375,0.5,1,1,0.5");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [PhantomMode::Single, PhantomMode::Multi] {
            assert_eq!(mode.name().parse::<PhantomMode>().unwrap(), mode);
        }
        assert!("both".parse::<PhantomMode>().is_err());
    }
}
