//! Monotone intensity translation built from cubic Bézier curves.
//!
//! A cubic Bézier with 2-D control points is a parametric curve, so the
//! translation is obtained by sampling the curve at `M` parameter values,
//! sorting the samples by abscissa and interpolating linearly between them.
//! With the endpoints pinned to `(0,0)-(1,1)` or `(0,1)-(1,0)` and the inner
//! control points in the unit square, both coordinates are monotone in the
//! curve parameter, so the resulting lookup is a monotone map of `[0, 1]`
//! onto itself and can be inverted by swapping the two columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::scalar::Scalar;

/// Default number of curve samples per table.
pub const DEFAULT_RESOLUTION: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point<S> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> Point<S> {
    pub fn new(x: S, y: S) -> Self {
        Self { x, y }
    }

    fn in_unit_square(&self) -> bool {
        let unit = |v: S| v >= S::zero() && v <= S::one();
        unit(self.x) && unit(self.y)
    }
}

/// Orientation of the translation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
    /// Fair coin flip between the two, drawn from the caller's rng.
    Random,
}

impl std::str::FromStr for Direction {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "increasing" => Ok(Direction::Increasing),
            "decreasing" => Ok(Direction::Decreasing),
            "random" => Ok(Direction::Random),
            other => Err(TowerError::Config(format!(
                "unknown translation direction `{other}`"
            ))),
        }
    }
}

/// Endpoints `p0`, `p3` and inner control points `p1`, `p2` of a cubic curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoints<S> {
    pub p0: Point<S>,
    pub p1: Point<S>,
    pub p2: Point<S>,
    pub p3: Point<S>,
}

impl<S: Scalar> ControlPoints<S> {
    /// Validates coordinate ranges and the endpoint convention.
    pub fn new(p0: Point<S>, p1: Point<S>, p2: Point<S>, p3: Point<S>) -> Result<Self> {
        let cp = Self { p0, p1, p2, p3 };
        if ![p0, p1, p2, p3].iter().all(Point::in_unit_square) {
            return Err(TowerError::Domain(
                "control point outside the unit square".into(),
            ));
        }
        if cp.direction().is_none() {
            return Err(TowerError::Domain(
                "endpoints must be (0,0)-(1,1) or (0,1)-(1,0)".into(),
            ));
        }
        Ok(cp)
    }

    /// `y = x`.
    pub fn identity() -> Self {
        let (z, o) = (S::zero(), S::one());
        Self {
            p0: Point::new(z, z),
            p1: Point::new(z, z),
            p2: Point::new(o, o),
            p3: Point::new(o, o),
        }
    }

    /// `y = 1 - x`.
    pub fn reversed() -> Self {
        let (z, o) = (S::zero(), S::one());
        Self {
            p0: Point::new(z, o),
            p1: Point::new(z, o),
            p2: Point::new(o, z),
            p3: Point::new(o, z),
        }
    }

    /// `Increasing` or `Decreasing` from the endpoints; `None` if the
    /// endpoints follow neither convention.
    pub fn direction(&self) -> Option<Direction> {
        let (z, o) = (S::zero(), S::one());
        let pin = |p: Point<S>, x: S, y: S| p.x == x && p.y == y;
        if pin(self.p0, z, z) && pin(self.p3, o, o) {
            Some(Direction::Increasing)
        } else if pin(self.p0, z, o) && pin(self.p3, o, z) {
            Some(Direction::Decreasing)
        } else {
            None
        }
    }

    pub fn cast<T: Scalar>(&self) -> ControlPoints<T> {
        let c = |p: Point<S>| Point::new(T::lit(p.x.as_f64()), T::lit(p.y.as_f64()));
        ControlPoints {
            p0: c(self.p0),
            p1: c(self.p1),
            p2: c(self.p2),
            p3: c(self.p3),
        }
    }
}

/// Evaluates the cubic Bernstein form at `t`.
pub fn bezier_point<S: Scalar>(cp: &ControlPoints<S>, t: S) -> Result<Point<S>> {
    if !(t >= S::zero() && t <= S::one()) {
        return Err(TowerError::Domain(format!(
            "curve parameter {t} outside [0, 1]"
        )));
    }
    Ok(eval(cp, t))
}

#[inline]
fn eval<S: Scalar>(cp: &ControlPoints<S>, t: S) -> Point<S> {
    let s = S::one() - t;
    let three = S::lit(3.0);
    let b0 = s * s * s;
    let b1 = three * s * s * t;
    let b2 = three * s * t * t;
    let b3 = t * t * t;
    Point::new(
        b0 * cp.p0.x + b1 * cp.p1.x + b2 * cp.p2.x + b3 * cp.p3.x,
        b0 * cp.p0.y + b1 * cp.p1.y + b2 * cp.p2.y + b3 * cp.p3.y,
    )
}

/// Piecewise-linear `x -> y` lookup sampled from a control-point curve.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationTable<S> {
    abscissa: Vec<S>,
    ordinate: Vec<S>,
    source: ControlPoints<S>,
}

/// Samples the curve at `resolution` uniform parameter values.
pub fn build_translation<S: Scalar>(
    cp: &ControlPoints<S>,
    resolution: usize,
) -> Result<TranslationTable<S>> {
    if resolution < 2 {
        return Err(TowerError::Config(format!(
            "translation resolution {resolution} < 2"
        )));
    }
    let last = S::lit((resolution - 1) as f64);
    let samples: Vec<(S, S)> = (0..resolution)
        .map(|i| {
            let p = eval(cp, S::lit(i as f64) / last);
            (p.x, p.y)
        })
        .collect();
    let (abscissa, ordinate) = sorted_unique(samples);
    Ok(TranslationTable {
        abscissa,
        ordinate,
        source: *cp,
    })
}

/// Stable sort by the first coordinate, drop repeated abscissae (first one
/// wins) and pin the ends to 0 and 1.
fn sorted_unique<S: Scalar>(mut samples: Vec<(S, S)>) -> (Vec<S>, Vec<S>) {
    samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut xs: Vec<S> = Vec::with_capacity(samples.len());
    let mut ys: Vec<S> = Vec::with_capacity(samples.len());
    for (x, y) in samples {
        if xs.last().is_some_and(|&prev| prev == x) {
            continue;
        }
        xs.push(x);
        ys.push(y);
    }
    if let Some(first) = xs.first_mut() {
        *first = S::zero();
    }
    if let Some(last) = xs.last_mut() {
        *last = S::one();
    }
    (xs, ys)
}

impl<S: Scalar> TranslationTable<S> {
    pub fn abscissa(&self) -> &[S] {
        &self.abscissa
    }

    pub fn ordinate(&self) -> &[S] {
        &self.ordinate
    }

    pub fn source(&self) -> &ControlPoints<S> {
        &self.source
    }

    /// Number of retained samples.
    pub fn resolution(&self) -> usize {
        self.abscissa.len()
    }

    /// Interpolated translation of `p`; inputs are clamped to `[0, 1]`.
    pub fn lookup(&self, p: S) -> S {
        let xs = &self.abscissa;
        let p = p.max(S::zero()).min(S::one());
        // first index with xs[i] > p
        let hi = xs.partition_point(|&x| x <= p);
        if hi == 0 {
            return self.ordinate[0];
        }
        if hi == xs.len() {
            return self.ordinate[xs.len() - 1];
        }
        let lo = hi - 1;
        if self.abscissa[lo] == self.ordinate[lo] && self.abscissa[hi] == self.ordinate[hi] {
            // segment on the diagonal: exact identity
            return p;
        }
        let span = xs[hi] - xs[lo];
        let w = if span > S::zero() {
            (p - xs[lo]) / span
        } else {
            S::zero()
        };
        let y = self.ordinate[lo] + w * (self.ordinate[hi] - self.ordinate[lo]);
        y.max(S::zero()).min(S::one())
    }

    /// Numerical inverse: swap columns and re-sort.
    pub fn inverted(&self) -> TranslationTable<S> {
        let pairs = self
            .ordinate
            .iter()
            .copied()
            .zip(self.abscissa.iter().copied())
            .collect();
        let (abscissa, ordinate) = sorted_unique(pairs);
        TranslationTable {
            abscissa,
            ordinate,
            source: self.source,
        }
    }
}

/// Replaces every pixel by its table lookup.
pub fn apply_translation<S: Scalar>(
    img: &Image<S>,
    table: &TranslationTable<S>,
) -> Result<Image<S>> {
    img.check_normalized()?;
    Ok(img.map(|p| table.lookup(p)))
}

/// Translation with one table per channel.
pub fn apply_translation_per_channel<S: Scalar>(
    img: &Image<S>,
    tables: &[TranslationTable<S>],
) -> Result<Image<S>> {
    img.check_normalized()?;
    if tables.len() != img.channels() {
        return Err(TowerError::Data(format!(
            "{} tables for a {}-channel image",
            tables.len(),
            img.channels()
        )));
    }
    let mut out = img.clone();
    let c = img.channels();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = tables[i % c].lookup(*v);
    }
    Ok(out)
}

/// Draws control points: endpoints from `direction`, inner points uniform
/// on the unit square.
pub fn sample_control_points<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    direction: Direction,
) -> ControlPoints<S> {
    let dir = match direction {
        Direction::Random => {
            if rng.random_bool(0.5) {
                Direction::Increasing
            } else {
                Direction::Decreasing
            }
        }
        d => d,
    };
    let mut unit = || S::lit(rng.random::<f64>());
    let p1 = Point::new(unit(), unit());
    let p2 = Point::new(unit(), unit());
    let (z, o) = (S::zero(), S::one());
    let (p0, p3) = match dir {
        Direction::Increasing => (Point::new(z, z), Point::new(o, o)),
        _ => (Point::new(z, o), Point::new(o, z)),
    };
    ControlPoints { p0, p1, p2, p3 }
}
