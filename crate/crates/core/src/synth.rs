//! Synthetic doorbell scenes and non-IID data partitioning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{ModelError, VisionError};
use crate::exec::Execution;
use crate::model::LabeledExample;
use crate::vision::{features_from_roi, BoundingBox, Frame};

pub const SCENE_SIZE: u32 = 64;
pub const BACKGROUND_LEVEL: u8 = 20;
pub const DEFAULT_CLASSES: [&str; 4] = ["person", "animal", "vehicle", "none"];

/// Shape drawn for each class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Tall ellipse.
    Person,
    /// Wide ellipse.
    Animal,
    /// Rectangle.
    Vehicle,
    /// Background only.
    Empty,
}

impl SceneKind {
    pub fn from_index(class_index: usize) -> Option<Self> {
        [Self::Person, Self::Animal, Self::Vehicle, Self::Empty]
            .get(class_index)
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frame: Frame,
    pub class_index: usize,
    /// Tight box around the drawn shape; `None` for empty scenes.
    pub bbox: Option<BoundingBox>,
    /// Region used for training features: `bbox`, or a random patch for empty scenes.
    pub feature_box: BoundingBox,
}

/// splitmix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw<F: Fn(u32, u32) -> bool>(frame: &mut Frame, value: u8, inside: F) -> Option<BoundingBox> {
    let (w, h) = (frame.width(), frame.height());
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let px = frame.pixels_mut();
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) {
                px[(y * w + x) as usize] = value;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x1 > 0).then(|| BoundingBox::new(x0, y0, x1, y1))
}

fn ellipse(
    frame: &mut Frame,
    rng: &mut ChaCha8Rng,
    rx: (f64, f64),
    ry: (f64, f64),
    level: (u8, u8),
) -> Option<BoundingBox> {
    let s = SCENE_SIZE as f64;
    let rx = rng.random_range(rx.0..rx.1);
    let ry = rng.random_range(ry.0..ry.1);
    let cx = rng.random_range(rx + 1.0..s - rx - 1.0);
    let cy = rng.random_range(ry + 1.0..s - ry - 1.0);
    let value = rng.random_range(level.0..=level.1);
    draw(frame, value, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

/// 64x64 scene: uniform background at level 20 plus one class-specific shape.
/// Identical `(class_index, seed)` pairs give identical scenes.
pub fn generate_scene(class_index: usize, seed: u64) -> Result<Scene, VisionError> {
    let kind = SceneKind::from_index(class_index)
        .ok_or_else(|| VisionError::Dimension(format!("no scene for class {class_index}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class_index as u64 + 1));
    let mut frame = Frame::filled(SCENE_SIZE, SCENE_SIZE, BACKGROUND_LEVEL, 0)?;
    let bbox = match kind {
        SceneKind::Person => ellipse(&mut frame, &mut rng, (5.0, 8.0), (13.0, 20.0), (150, 190)),
        SceneKind::Animal => ellipse(&mut frame, &mut rng, (13.0, 20.0), (5.0, 8.0), (95, 135)),
        SceneKind::Vehicle => {
            let w = rng.random_range(18..=32u32);
            let h = rng.random_range(10..=16u32);
            let x0 = rng.random_range(1..SCENE_SIZE - w);
            let y0 = rng.random_range(1..SCENE_SIZE - h);
            let value = rng.random_range(200..=245u8);
            draw(&mut frame, value, |x, y| {
                (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y)
            })
        }
        SceneKind::Empty => None,
    };
    let feature_box = match bbox {
        Some(b) => b,
        None => {
            let w = rng.random_range(10..=30u32);
            let h = rng.random_range(10..=30u32);
            let x0 = rng.random_range(0..=SCENE_SIZE - w);
            let y0 = rng.random_range(0..=SCENE_SIZE - h);
            BoundingBox::new(x0, y0, x0 + w, y0 + h)
        }
    };
    Ok(Scene {
        frame,
        class_index,
        bbox,
        feature_box,
    })
}

/// Training example for a scene: features of its feature box, labelled by class.
pub fn scene_example(scene: &Scene) -> Result<LabeledExample, VisionError> {
    Ok(LabeledExample {
        features: features_from_roi(&scene.frame, &scene.feature_box)?,
        label: scene.class_index,
    })
}

/// `n` examples cycling through `num_classes` classes; example `i` uses scene seed `mix_seed(seed, i)`.
pub fn build_dataset(n: usize, num_classes: usize, seed: u64) -> Result<Vec<LabeledExample>, VisionError> {
    build_dataset_with(Execution::default(), n, num_classes, seed)
}

pub fn build_dataset_with(
    exec: Execution,
    n: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>, VisionError> {
    if num_classes == 0 || SceneKind::from_index(num_classes - 1).is_none() {
        return Err(VisionError::Dimension(format!(
            "scene generator supports 1..=4 classes, got {num_classes}"
        )));
    }
    exec.map_indices(n, |i| {
        let scene = generate_scene(i % num_classes, mix_seed(seed, i as u64))?;
        scene_example(&scene)
    })
    .into_iter()
    .collect()
}

/// Splits example indices into `k` disjoint, non-empty shards with per-class
/// client proportions drawn from Dirichlet(`alpha`).
pub fn partition_indices(labels: &[usize], k: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>, ModelError> {
    if k < 1 || k > labels.len() {
        return Err(ModelError::Precondition(format!(
            "cannot split {} examples into {k} shards",
            labels.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ModelError::Config(format!("concentration {alpha} must be positive")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| ModelError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|d| d / total).collect()
        } else {
            vec![1.0 / k as f64; k]
        };
        let m = members.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (client, p) in props.iter().enumerate() {
            cumulative += p;
            let end = if client + 1 == k {
                m
            } else {
                ((cumulative * m as f64).round() as usize).clamp(start, m)
            };
            shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..k)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("k >= 1");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    Ok(shards)
}

pub fn partition_data(
    dataset: &[LabeledExample],
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<LabeledExample>>, ModelError> {
    let labels: Vec<usize> = dataset.iter().map(|e| e.label).collect();
    Ok(partition_indices(&labels, k, alpha, seed)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| dataset[i].clone()).collect())
        .collect())
}
