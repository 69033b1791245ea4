//! Bundle Adjustment in the Large: file format, Snavely camera model and
//! graph construction.

mod snavely;
mod synthetic;

pub use snavely::{
    snavely_camera_jacobian, snavely_point_jacobian, snavely_project, CameraVertex, PointVertex, ReprojectionFactor,
};
pub use synthetic::{generate_synthetic_bal, SyntheticBalConfig};

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::differentiation::DifferentiationMode;
use crate::graph::{FactorDescriptor, FactorSetId, Graph, GraphError, Loss, VertexDescriptor, VertexSetId};
use crate::precision::{Real, Storage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalObservation<G> {
    pub camera: u32,
    pub point: u32,
    pub pixel: [G; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalProblem<G> {
    pub observations: Vec<BalObservation<G>>,
    pub cameras: Vec<[G; 9]>,
    pub points: Vec<[G; 3]>,
}

#[derive(Debug, Error)]
pub enum BalError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: file ends early, expected {expected}")]
    Truncated { line: usize, expected: String },
    #[error("line {line}: cannot parse {token:?} as {expected}")]
    BadToken {
        line: usize,
        token: String,
        expected: &'static str,
    },
    #[error("line {line}: {what} index {index} out of range (count {count})")]
    IndexOutOfRange {
        line: usize,
        what: &'static str,
        index: u64,
        count: usize,
    },
}

struct Tokens<'s> {
    lines: std::iter::Enumerate<std::str::Lines<'s>>,
    current: Option<(usize, std::str::SplitWhitespace<'s>)>,
    last_line: usize,
}

impl<'s> Tokens<'s> {
    fn new(text: &'s str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            current: None,
            last_line: 0,
        }
    }

    /// Next token with its 1-based line number.
    fn next(&mut self, expected: impl FnOnce() -> String) -> Result<(usize, &'s str), BalError> {
        loop {
            if let Some((line, words)) = &mut self.current {
                if let Some(w) = words.next() {
                    return Ok((*line, w));
                }
            }
            match self.lines.next() {
                Some((i, l)) => {
                    self.last_line = i + 1;
                    self.current = Some((i + 1, l.split_whitespace()));
                }
                None => {
                    return Err(BalError::Truncated {
                        line: self.last_line + 1,
                        expected: expected(),
                    })
                }
            }
        }
    }

    fn number<T: std::str::FromStr>(
        &mut self,
        what: &'static str,
        expected: impl FnOnce() -> String,
    ) -> Result<(usize, T), BalError> {
        let (line, tok) = self.next(expected)?;
        tok.parse::<T>().map(|v| (line, v)).map_err(|_| BalError::BadToken {
            line,
            token: tok.to_string(),
            expected: what,
        })
    }
}

impl BalProblem<f64> {
    /// Parses BAL text, gunzipping transparently when the stream starts with
    /// the gzip magic bytes. Values are read at binary64.
    pub fn parse<R: Read>(mut reader: R) -> Result<Self, BalError> {
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        let text = if raw.starts_with(&[0x1f, 0x8b]) {
            let mut s = String::new();
            GzDecoder::new(raw.as_slice()).read_to_string(&mut s)?;
            s
        } else {
            String::from_utf8(raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?
        };
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, BalError> {
        let mut t = Tokens::new(text);
        let (_, num_cameras) = t.number::<usize>("camera count", || "header: camera count".into())?;
        let (_, num_points) = t.number::<usize>("point count", || "header: point count".into())?;
        let (_, num_observations) =
            t.number::<usize>("observation count", || "header: observation count".into())?;

        let mut observations = Vec::with_capacity(num_observations);
        for k in 0..num_observations {
            let (line, camera) = t.number::<u64>("camera index", || format!("observation {k}"))?;
            if camera >= num_cameras as u64 {
                return Err(BalError::IndexOutOfRange {
                    line,
                    what: "camera",
                    index: camera,
                    count: num_cameras,
                });
            }
            let (line, point) = t.number::<u64>("point index", || format!("observation {k}: point index"))?;
            if point >= num_points as u64 {
                return Err(BalError::IndexOutOfRange {
                    line,
                    what: "point",
                    index: point,
                    count: num_points,
                });
            }
            let (_, x) = t.number::<f64>("pixel x", || format!("observation {k}: pixel x"))?;
            let (_, y) = t.number::<f64>("pixel y", || format!("observation {k}: pixel y"))?;
            observations.push(BalObservation {
                camera: camera as u32,
                point: point as u32,
                pixel: [x, y],
            });
        }
        let mut cameras = Vec::with_capacity(num_cameras);
        for c in 0..num_cameras {
            let mut cam = [0.0; 9];
            for (j, v) in cam.iter_mut().enumerate() {
                *v = t.number::<f64>("camera parameter", || format!("camera {c} parameter {j}"))?.1;
            }
            cameras.push(cam);
        }
        let mut points = Vec::with_capacity(num_points);
        for p in 0..num_points {
            let mut pt = [0.0; 3];
            for (j, v) in pt.iter_mut().enumerate() {
                *v = t.number::<f64>("point coordinate", || format!("point {p} coordinate {j}"))?.1;
            }
            points.push(pt);
        }
        Ok(Self {
            observations,
            cameras,
            points,
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, BalError> {
        Self::parse(std::fs::File::open(path)?)
    }
}

impl<G: Real> BalProblem<G> {
    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    /// Narrows (or widens) every value to `H`, rounding to nearest.
    pub fn convert<H: Real>(&self) -> BalProblem<H> {
        let c = |x: G| H::lit(x.to_f64_lossless());
        BalProblem {
            observations: self
                .observations
                .iter()
                .map(|o| BalObservation {
                    camera: o.camera,
                    point: o.point,
                    pixel: o.pixel.map(c),
                })
                .collect(),
            cameras: self.cameras.iter().map(|v| v.map(c)).collect(),
            points: self.points.iter().map(|v| v.map(c)).collect(),
        }
    }

    /// BAL text in the canonical layout; values use the shortest
    /// representation that parses back to the same binary64.
    pub fn to_bal_string(&self) -> String {
        let mut s = String::new();
        let v = |x: G| x.to_f64_lossless();
        let _ = writeln!(s, "{} {} {}", self.num_cameras(), self.num_points(), self.num_observations());
        for o in &self.observations {
            let _ = writeln!(s, "{} {} {:e} {:e}", o.camera, o.point, v(o.pixel[0]), v(o.pixel[1]));
        }
        for cam in &self.cameras {
            for &x in cam {
                let _ = writeln!(s, "{:e}", v(x));
            }
        }
        for pt in &self.points {
            for &x in pt {
                let _ = writeln!(s, "{:e}", v(x));
            }
        }
        s
    }
}

/// Graph over a BAL problem. Cameras and points are refined in place.
pub struct BalGraph<'a, G: Real, S: Storage<G>> {
    pub graph: Graph<'a, G, S>,
    pub cameras: VertexSetId,
    pub points: VertexSetId,
    pub factors: FactorSetId,
    pub num_observations: usize,
}

impl<'a, G: Real, S: Storage<G>> BalGraph<'a, G, S> {
    /// `Σ ‖r‖² / num_observations` with raw residuals (no loss, no
    /// information weighting), in pixels².
    pub fn mse(&self) -> f64 {
        if self.num_observations == 0 {
            return 0.0;
        }
        self.graph.raw_squared_error(0).to_f64_lossless() / self.num_observations as f64
    }
}

/// One camera descriptor, one point descriptor and one reprojection factor
/// per observation with identity information at level 0.
pub fn build_bal_graph<'a, G: Real, S: Storage<G>>(
    problem: &'a mut BalProblem<G>,
    mode: DifferentiationMode,
    huber_delta: Option<f64>,
) -> Result<BalGraph<'a, G, S>, GraphError> {
    let BalProblem {
        observations,
        cameras,
        points,
    } = problem;
    let mut graph = Graph::<G, S>::new();
    let mut cam_desc = VertexDescriptor::<G, CameraVertex>::with_capacity(cameras.len());
    for (i, c) in cameras.iter_mut().enumerate() {
        cam_desc.add_vertex(i as u64, c)?;
    }
    let mut point_desc = VertexDescriptor::<G, PointVertex>::with_capacity(points.len());
    for (i, p) in points.iter_mut().enumerate() {
        point_desc.add_vertex(i as u64, p)?;
    }
    let cams = graph.add_vertex_descriptor(cam_desc)?;
    let pts = graph.add_vertex_descriptor(point_desc)?;
    let loss = match huber_delta {
        Some(d) => Loss::huber(G::lit(d)),
        None => Loss::Default,
    };
    let mut factors = FactorDescriptor::new(ReprojectionFactor, &[cams, pts], mode)?;
    factors.reserve(observations.len());
    for o in observations.iter() {
        factors.add_factor(&graph, &[o.camera as u64, o.point as u64], o.pixel, None, 0u8, loss)?;
    }
    let factors = graph.add_factor_descriptor(factors)?;
    Ok(BalGraph {
        graph,
        cameras: cams,
        points: pts,
        factors,
        num_observations: observations.len(),
    })
}
