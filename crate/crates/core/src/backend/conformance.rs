//! Protocol conformance checks runnable against any backend.

use image::{Rgb, RgbImage};

use super::wire::{encode_image, encode_mask, InpaintRequestBody};
use super::{check_health, Backend, HttpBackend, InpaintRequest, DEFAULT_STEPS};
use crate::raster::BinaryMask;

pub const MAX_TAGS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn fixture_image(side: u32) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| {
        Rgb([(60 + (x * 3) % 120) as u8, (80 + (y * 5) % 100) as u8, ((x ^ y) % 200) as u8])
    })
}

fn fixture_mask(side: u32) -> BinaryMask {
    let c = side as f64 / 2.0;
    let r = side as f64 / 5.0;
    BinaryMask::from_fn(side, side, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
        dx * dx + dy * dy <= r * r
    })
}

fn check(name: &'static str, r: Result<String, String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Runs the fixture suite. `raw` additionally checks wire-level echoes that
/// the typed trait does not expose.
pub fn run(backend: &dyn Backend, raw: Option<&HttpBackend>, side: u32) -> Vec<CheckResult> {
    let img = fixture_image(side);
    let mask = fixture_mask(side);
    let mut out = Vec::new();

    out.push(check(
        "health",
        check_health(backend)
            .map(|h| format!("protocol {} with {} endpoints", h.protocol, h.endpoints.len()))
            .map_err(|e| e.to_string()),
    ));

    out.push(check("tags", {
        let batch = vec![img.clone(); 4];
        match backend.tags(&batch, MAX_TAGS) {
            Ok(t) if t.len() != batch.len() => Err(format!("{} lists for {} images", t.len(), batch.len())),
            Ok(t) => match t.iter().map(Vec::len).max().unwrap_or(0) {
                n if n <= MAX_TAGS => Ok(format!("longest list {n}")),
                n => Err(format!("list of {n} tags exceeds {MAX_TAGS}")),
            },
            Err(e) => Err(e.to_string()),
        }
    }));

    out.push(check("embed", {
        match (backend.embed(&img), backend.embed(&img)) {
            (Ok(a), Ok(b)) => {
                let n = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    Err(format!("norm {n}"))
                } else if a != b {
                    Err("repeated embed differs".into())
                } else {
                    Ok(format!("dim {}, norm {n:.7}", a.len()))
                }
            }
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        }
    }));

    out.push(check("align", match backend.align(&img, "defect") {
        Ok(s) if (0.0..=100.0).contains(&s) => Ok(format!("score {s:.3}")),
        Ok(s) => Err(format!("score {s} outside [0, 100]")),
        Err(e) => Err(e.to_string()),
    }));

    out.push(check("inpaint", {
        let req = InpaintRequest {
            background_patch: img.clone(),
            mask_patch: mask.clone(),
            prompt: "defect".into(),
            seed: 11,
            steps: DEFAULT_STEPS,
        };
        match (backend.inpaint(&req), backend.inpaint(&req)) {
            (Ok(a), Ok(b)) if a.image.dimensions() != img.dimensions() => {
                let _ = b;
                Err(format!("output size {:?}", a.image.dimensions()))
            }
            (Ok(a), Ok(b)) if a.image != b.image => Err("same seed gave different images".into()),
            (Ok(_), Ok(_)) => Ok("deterministic for a fixed seed".into()),
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        }
    }));

    if let Some(http) = raw {
        out.push(check("inpaint-echo", {
            let body = InpaintRequestBody {
                image: encode_image(&img),
                mask: encode_mask(&mask),
                prompt: "defect".into(),
                seed: 12345,
                steps: 7,
            };
            match http.inpaint_raw(&body) {
                Ok(r) if r.seed == Some(12345) && r.steps == Some(7) => Ok("seed and steps echoed".into()),
                Ok(r) => Err(format!("echoed seed {:?} steps {:?}", r.seed, r.steps)),
                Err(e) => Err(e.to_string()),
            }
        }));
    }

    out.push(check("segment", {
        let b = mask.bbox().expect("fixture mask non-empty").to_xywh();
        match backend.segment(&img, b, "defect", Some(&mask)) {
            Ok(m) if m.dims() == img.dimensions() => Ok(format!("area {}", m.area())),
            Ok(m) => Err(format!("mask size {:?}", m.dims())),
            Err(e) => Err(e.to_string()),
        }
    }));

    out
}
