//! wasm-bindgen bindings behind `www/index.html`.

use wasm_bindgen::prelude::*;

use odcl::encoder::build_attention_mask;
use odcl::stream::{generate_stream, ImageShape, StreamConfig};
use odcl::vocabulary::ClassVocabulary;

const TILE: usize = 16;

/// Row-major `size × size` mask for `prompts` task prompts and `patches`
/// patch tokens, 1 where attention is allowed.
#[wasm_bindgen]
pub fn attention_mask(prompts: usize, patches: usize) -> Vec<u8> {
    let m = build_attention_mask(prompts.min(16), patches.clamp(1, 64));
    let mut out = Vec::with_capacity(m.size * m.size);
    for q in 0..m.size {
        for k in 0..m.size {
            out.push(u8::from(m.get(q, k)));
        }
    }
    out
}

/// RGBA atlas with one test image per class: one row per task, one column
/// per class. Width is `classes * 16`, height `tasks * 16`.
#[wasm_bindgen]
pub fn stream_preview(tasks: usize, classes: usize, shift: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    let cfg = StreamConfig {
        num_tasks: tasks.clamp(1, 8),
        classes_per_task: classes.clamp(1, 8),
        samples_per_class_train: 1,
        samples_per_class_test: 1,
        image_shape: ImageShape::new(TILE, TILE, 3),
        domain_shift_strength: shift.max(0.0),
        seed,
        ..Default::default()
    };
    let stream = generate_stream(&cfg).map_err(|e| JsError::new(&e.to_string()))?;
    let width = cfg.classes_per_task * TILE;
    let mut rgba = vec![255u8; width * cfg.num_tasks * TILE * 4];
    for (row, task) in stream.tasks.iter().enumerate() {
        for (col, class) in task.class_set.iter().enumerate() {
            let Some(img) = task.test_samples.iter().find(|s| &s.label == class) else {
                continue;
            };
            for y in 0..TILE {
                for x in 0..TILE {
                    let at = ((row * TILE + y) * width + col * TILE + x) * 4;
                    for c in 0..3 {
                        let v = img.pixel(stream.image_shape, y, x, c).clamp(0.0, 1.0);
                        rgba[at + c] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    Ok(rgba)
}

/// Class names of the same stream `stream_preview` draws, tab separated per task.
#[wasm_bindgen]
pub fn stream_classes(tasks: usize, classes: usize, seed: u64) -> Result<Vec<String>, JsError> {
    let cfg = StreamConfig {
        num_tasks: tasks.clamp(1, 8),
        classes_per_task: classes.clamp(1, 8),
        samples_per_class_train: 1,
        samples_per_class_test: 1,
        image_shape: ImageShape::new(4, 4, 3),
        seed,
        ..Default::default()
    };
    let stream = generate_stream(&cfg).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(stream.tasks.iter().map(|t| t.class_set.join("\t")).collect())
}

/// Distance of a vocabulary entry to a fixed target after each of `steps`
/// momentum updates, relative to the starting distance.
#[wasm_bindgen]
pub fn momentum_curve(alpha: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let start = vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.5, 0.75, 0.5];
    let target = vec![-0.25, 0.5, 1.0, 0.0, 0.8, 0.3, -0.6, 0.1];
    let mut vocab = ClassVocabulary::new(start.len(), alpha.clamp(0.0, 1.0));
    vocab
        .ensure_entries(&["class".to_string()], 1, |_| Ok(start.clone()))
        .map_err(|e| JsError::new(&e.to_string()))?;
    let dist = |v: &[f64]| v.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let d0 = dist(&start);
    let mut out = vec![1.0];
    for _ in 0..steps.min(10_000) {
        let v = vocab.momentum_update("class", &target).map_err(|e| JsError::new(&e.to_string()))?;
        out.push(dist(v) / d0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_has_expected_size_and_diagonal() {
        let m = attention_mask(2, 4);
        assert_eq!(m.len(), 49);
        assert!((0..7).all(|i| m[i * 7 + i] == 1));
        assert_eq!(m.iter().filter(|&&v| v == 0).count(), 1 + 5 * 2);
    }

    #[test]
    fn momentum_curve_is_geometric() {
        let c = momentum_curve(0.1, 10).unwrap();
        for (k, v) in c.iter().enumerate() {
            assert!((v - 0.9f64.powi(k as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn preview_has_atlas_size() {
        assert_eq!(stream_preview(3, 4, 1.0, 0).unwrap().len(), 4 * 16 * 3 * 16 * 4);
        assert_eq!(stream_classes(3, 4, 0).unwrap().len(), 3);
    }
}
