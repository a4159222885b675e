//! Box geometry on a fixed sub-pixel grid.
//!
//! Coordinates are stored as integers in units of `1 / SUBPIXEL` pixels.
//! Boxes entering from outside (annotation files, Python, tests) are snapped
//! to a coarser grid of `1 / 32768` px whose step is divisible by every
//! supported collage side (1, 2 and 3). Dividing an ingested box by the
//! collage side is therefore exact, so the area of a transformed box is
//! exactly `area / k` and its aspect ratio is unchanged.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Internal units per pixel (2^15 * 6).
pub const SUBPIXEL: i64 = 196_608;

/// Grid step, in internal units, for coordinates entering from outside.
const INGEST_STEP: i64 = 6;

const INGEST_PER_PX: f64 = (SUBPIXEL / INGEST_STEP) as f64;

/// Largest accepted coordinate magnitude in pixels.
const MAX_COORD_PX: f64 = 1.0e9;

fn quantize(v: f64) -> Result<i64, GeometryError> {
    if !v.is_finite() || v.abs() > MAX_COORD_PX {
        return Err(GeometryError::OutOfRange(v));
    }
    Ok((v * INGEST_PER_PX).round() as i64 * INGEST_STEP)
}

fn to_px(raw: i64) -> f64 {
    raw as f64 / SUBPIXEL as f64
}

/// Exact box area in internal units squared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExactArea(i128);

impl ExactArea {
    pub const fn from_square_px(px2: i64) -> Self {
        Self(px2 as i128 * (SUBPIXEL as i128) * (SUBPIXEL as i128))
    }

    /// Converts a pixel-squared threshold, exact for integral inputs.
    pub fn from_px2(px2: f64) -> Self {
        let units = px2 * (SUBPIXEL as f64) * (SUBPIXEL as f64);
        Self(units.round() as i128)
    }

    pub fn raw(self) -> i128 {
        self.0
    }

    pub fn to_px2(self) -> f64 {
        self.0 as f64 / (SUBPIXEL as f64 * SUBPIXEL as f64)
    }
}

/// Axis-aligned box `(x, y, w, h)` with `w > 0` and `h > 0`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x: quantize(x)?,
            y: quantize(y)?,
            w: quantize(w)?,
            h: quantize(h)?,
        };
        if b.w <= 0 || b.h <= 0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        Ok(b)
    }

    pub fn x(&self) -> f64 {
        to_px(self.x)
    }

    pub fn y(&self) -> f64 {
        to_px(self.y)
    }

    pub fn w(&self) -> f64 {
        to_px(self.w)
    }

    pub fn h(&self) -> f64 {
        to_px(self.h)
    }

    pub fn right(&self) -> f64 {
        to_px(self.x + self.w)
    }

    pub fn bottom(&self) -> f64 {
        to_px(self.y + self.h)
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.x(), self.y(), self.w(), self.h()]
    }

    /// Raw grid coordinates `[x, y, w, h]` in units of `1 / SUBPIXEL` px.
    pub fn raw_xywh(&self) -> [i64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.exact_area().to_px2()
    }

    pub fn exact_area(&self) -> ExactArea {
        ExactArea(self.w as i128 * self.h as i128)
    }

    /// Clips the box to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<Self> {
        let max_x = width as i64 * SUBPIXEL;
        let max_y = height as i64 * SUBPIXEL;
        let x0 = self.x.clamp(0, max_x);
        let y0 = self.y.clamp(0, max_y);
        let x1 = (self.x + self.w).clamp(0, max_x);
        let y1 = (self.y + self.h).clamp(0, max_y);
        (x1 > x0 && y1 > y0).then(|| Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Maps the box by `p -> p / divisor + offset`.
    ///
    /// Exact for any box built through [`BoundingBox::new`] and a divisor of
    /// 1, 2 or 3. Other inputs are rounded toward negative infinity.
    pub fn downscale_translate(&self, divisor: u32, offset_x: u32, offset_y: u32) -> Self {
        let d = divisor as i64;
        Self {
            x: self.x.div_euclid(d) + offset_x as i64 * SUBPIXEL,
            y: self.y.div_euclid(d) + offset_y as i64 * SUBPIXEL,
            w: self.w.div_euclid(d).max(1),
            h: self.h.div_euclid(d).max(1),
        }
    }

    /// True when the box lies inside the pixel rectangle `[x0, x0 + w] x [y0, y0 + h]`.
    pub fn within(&self, x0: u32, y0: u32, w: u32, h: u32) -> bool {
        let (x0, y0) = (x0 as i64 * SUBPIXEL, y0 as i64 * SUBPIXEL);
        let (x1, y1) = (x0 + w as i64 * SUBPIXEL, y0 + h as i64 * SUBPIXEL);
        self.x >= x0 && self.y >= y0 && self.x + self.w <= x1 && self.y + self.h <= y1
    }
}

impl fmt::Debug for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BoundingBox({}, {}, {}, {})",
            self.x(),
            self.y(),
            self.w(),
            self.h()
        )
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.xywh().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        BoundingBox::new(x, y, w, h).map_err(serde::de::Error::custom)
    }
}

/// COCO scale protocol bucket, ordered `Small < Medium < Large`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

impl ScaleClass {
    pub const ALL: [ScaleClass; 3] = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large];

    pub fn short_name(self) -> &'static str {
        match self {
            ScaleClass::Small => "s",
            ScaleClass::Medium => "m",
            ScaleClass::Large => "l",
        }
    }
}

impl fmt::Display for ScaleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleClass::Small => "small",
            ScaleClass::Medium => "medium",
            ScaleClass::Large => "large",
        })
    }
}

/// Lower area bound of the medium bucket (32^2 px^2).
pub const MEDIUM_MIN_AREA: ExactArea = ExactArea::from_square_px(32 * 32);
/// Lower area bound of the large bucket (96^2 px^2).
pub const LARGE_MIN_AREA: ExactArea = ExactArea::from_square_px(96 * 96);

pub fn classify_area(area: ExactArea) -> ScaleClass {
    if area < MEDIUM_MIN_AREA {
        ScaleClass::Small
    } else if area < LARGE_MIN_AREA {
        ScaleClass::Medium
    } else {
        ScaleClass::Large
    }
}

/// Small below 32^2, medium in `[32^2, 96^2)`, large from 96^2 up.
pub fn classify_scale(bbox: &BoundingBox) -> ScaleClass {
    classify_area(bbox.exact_area())
}

/// One value per scale class. Serializes as `{"s": .., "m": .., "l": ..}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerScale<T> {
    pub s: T,
    pub m: T,
    pub l: T,
}

impl<T> PerScale<T> {
    pub fn new(s: T, m: T, l: T) -> Self {
        Self { s, m, l }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> PerScale<U> {
        PerScale {
            s: f(self.s),
            m: f(self.m),
            l: f(self.l),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ScaleClass, &T)> {
        ScaleClass::ALL.into_iter().map(move |c| (c, &self[c]))
    }

    pub fn values(&self) -> [&T; 3] {
        [&self.s, &self.m, &self.l]
    }
}

impl<T: Copy + std::iter::Sum<T>> PerScale<T> {
    pub fn total(&self) -> T {
        [self.s, self.m, self.l].into_iter().sum()
    }
}

impl<T> Index<ScaleClass> for PerScale<T> {
    type Output = T;

    fn index(&self, c: ScaleClass) -> &T {
        match c {
            ScaleClass::Small => &self.s,
            ScaleClass::Medium => &self.m,
            ScaleClass::Large => &self.l,
        }
    }
}

impl<T> IndexMut<ScaleClass> for PerScale<T> {
    fn index_mut(&mut self, c: ScaleClass) -> &mut T {
        match c {
            ScaleClass::Small => &mut self.s,
            ScaleClass::Medium => &mut self.m,
            ScaleClass::Large => &mut self.l,
        }
    }
}

impl<T: Copy + std::ops::AddAssign> std::ops::AddAssign for PerScale<T> {
    fn add_assign(&mut self, rhs: Self) {
        self.s += rhs.s;
        self.m += rhs.m;
        self.l += rhs.l;
    }
}
