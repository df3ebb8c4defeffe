//! Decision-boundary rasters and margin estimation on the plane.
//!
//! A predictor is any closure mapping an n-by-2 matrix of query points to
//! n logits; callers bake input augmentation (such as a constant-1 third
//! coordinate) into the closure. The margin of a trained model is the
//! smallest distance from any training point to the zero level set of the
//! logit, estimated by locating sign changes on a grid and bisecting each
//! crossing edge.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::objectives::sigmoid;
use crate::{Error, Result};

/// Axis-aligned query window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Bounds> {
        let b = Bounds {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        if !(x_min < x_max && y_min < y_max)
            || [x_min, x_max, y_min, y_max].iter().any(|v| !v.is_finite())
        {
            return Err(Error::Config(format!("degenerate bounds {b:?}")));
        }
        Ok(b)
    }

    /// Window that comfortably frames the default two-moon data.
    pub fn two_moon() -> Bounds {
        Bounds::new(-1.6, 2.6, -1.6, 1.7).expect("static bounds")
    }
}

/// Logit values sampled on a regular grid of (resolution+1)^2 nodes.
#[derive(Debug, Clone)]
pub struct BoundaryMap {
    pub bounds: Bounds,
    pub resolution: usize,
    /// values[[i, j]] is the logit at x = x_min + i*dx, y = y_min + j*dy.
    pub values: Array2<f64>,
}

fn predict_all<F>(predict: &F, pts: &Array2<f64>) -> Result<Array1<f64>>
where
    F: Fn(&Array2<f64>) -> Result<Array1<f64>>,
{
    let out = predict(pts)?;
    if out.len() != pts.nrows() {
        return Err(Error::Shape(format!(
            "predictor returned {} logits for {} points",
            out.len(),
            pts.nrows()
        )));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("predictor produced non-finite logit".into()));
    }
    Ok(out)
}

/// Evaluate the predictor on the grid.
pub fn sample_boundary<F>(predict: &F, bounds: Bounds, resolution: usize) -> Result<BoundaryMap>
where
    F: Fn(&Array2<f64>) -> Result<Array1<f64>>,
{
    if resolution < 2 {
        return Err(Error::Config("resolution must be at least 2".into()));
    }
    let nodes = resolution + 1;
    let dx = (bounds.x_max - bounds.x_min) / resolution as f64;
    let dy = (bounds.y_max - bounds.y_min) / resolution as f64;
    let mut pts = Array2::zeros((nodes * nodes, 2));
    for i in 0..nodes {
        for j in 0..nodes {
            pts[[i * nodes + j, 0]] = bounds.x_min + i as f64 * dx;
            pts[[i * nodes + j, 1]] = bounds.y_min + j as f64 * dy;
        }
    }
    let z = predict_all(predict, &pts)?;
    let values = Array2::from_shape_fn((nodes, nodes), |(i, j)| z[i * nodes + j]);
    Ok(BoundaryMap {
        bounds,
        resolution,
        values,
    })
}

/// Points where the logit crosses zero, one per sign-changing grid edge,
/// each refined by `refine_steps` rounds of bisection along its edge.
pub fn boundary_points<F>(
    predict: &F,
    map: &BoundaryMap,
    refine_steps: usize,
) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&Array2<f64>) -> Result<Array1<f64>>,
{
    let nodes = map.resolution + 1;
    let dx = (map.bounds.x_max - map.bounds.x_min) / map.resolution as f64;
    let dy = (map.bounds.y_max - map.bounds.y_min) / map.resolution as f64;
    let node = |i: usize, j: usize| {
        (
            map.bounds.x_min + i as f64 * dx,
            map.bounds.y_min + j as f64 * dy,
        )
    };
    // Each active edge keeps endpoints (a, b) with f(a) and f(b) of
    // opposite sign; bisection halves the bracket every round for all
    // edges at once, so refinement costs refine_steps predictor calls.
    let mut lo: Vec<((f64, f64), f64)> = Vec::new();
    let mut hi: Vec<(f64, f64)> = Vec::new();
    for i in 0..nodes {
        for j in 0..nodes {
            let v = map.values[[i, j]];
            if i + 1 < nodes && opposite(v, map.values[[i + 1, j]]) {
                lo.push((node(i, j), v));
                hi.push(node(i + 1, j));
            }
            if j + 1 < nodes && opposite(v, map.values[[i, j + 1]]) {
                lo.push((node(i, j), v));
                hi.push(node(i, j + 1));
            }
        }
    }
    if lo.is_empty() {
        return Ok(Vec::new());
    }
    for _ in 0..refine_steps {
        let mut mids = Array2::zeros((lo.len(), 2));
        for (k, (&((ax, ay), _), &(bx, by))) in lo.iter().zip(hi.iter()).enumerate() {
            mids[[k, 0]] = 0.5 * (ax + bx);
            mids[[k, 1]] = 0.5 * (ay + by);
        }
        let fm = predict_all(predict, &mids)?;
        for k in 0..lo.len() {
            let m = (mids[[k, 0]], mids[[k, 1]]);
            if opposite(lo[k].1, fm[k]) {
                hi[k] = m;
            } else {
                lo[k] = (m, fm[k]);
            }
        }
    }
    Ok(lo
        .iter()
        .zip(hi.iter())
        .map(|(&((ax, ay), _), &(bx, by))| (0.5 * (ax + bx), 0.5 * (ay + by)))
        .collect())
}

fn opposite(a: f64, b: f64) -> bool {
    (a > 0.0) != (b > 0.0)
}

/// Smallest distance from any of `points` (n-by-2, extra columns ignored)
/// to the predictor's zero level set inside `bounds`. Returns +infinity
/// when the logit has one sign on the whole window.
pub fn margin<F>(
    predict: &F,
    points: &Array2<f64>,
    bounds: Bounds,
    resolution: usize,
) -> Result<f64>
where
    F: Fn(&Array2<f64>) -> Result<Array1<f64>>,
{
    if points.ncols() < 2 {
        return Err(Error::Shape("points need at least 2 columns".into()));
    }
    let map = sample_boundary(predict, bounds, resolution)?;
    let crossings = boundary_points(predict, &map, 10)?;
    if crossings.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut best = f64::INFINITY;
    for r in 0..points.nrows() {
        let (px, py) = (points[[r, 0]], points[[r, 1]]);
        for &(cx, cy) in &crossings {
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
    }
    Ok(best)
}

/// Write the map as a binary P5 PGM, one pixel per grid node, with
/// sigmoid(logit) mapped onto 0..=255. Row order follows image
/// convention: top row is y_max.
pub fn write_pgm(map: &BoundaryMap, path: &Path) -> Result<()> {
    let nodes = map.resolution + 1;
    let mut out = Vec::with_capacity(nodes * nodes + 32);
    out.extend_from_slice(format!("P5\n{nodes} {nodes}\n255\n").as_bytes());
    for j in (0..nodes).rev() {
        for i in 0..nodes {
            let p = sigmoid(map.values[[i, j]]);
            out.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
