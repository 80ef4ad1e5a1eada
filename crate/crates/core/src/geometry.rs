//! Boxes, feature-map locations and the `(l, t, r, b)` regression encoding.
//!
//! Boxes are continuous half-open rectangles in image pixels. A location is
//! "inside" a box only when it is strictly inside, so every regression vector
//! built for an inside location has four strictly positive components.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x0}, {y0}, {x1}, {y1}): need finite 0 <= x0 < x1 and 0 <= y0 < y1")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("location ({x}, {y}) is not strictly inside the ground-truth box")]
    LocationOutsideBox { x: f64, y: f64 },
    #[error("degenerate regression vector {0:?}: all components must be positive")]
    DegeneratePrediction([f64; 4]),
}

/// Axis-aligned box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.x0, raw.y0, raw.x1, raw.y1)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        }
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let finite = x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite();
        if !finite || x0 < 0.0 || y0 < 0.0 || x0 >= x1 || y0 >= y1 {
            return Err(GeometryError::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Strict containment; points on an edge are outside.
    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Scales both axes, e.g. to map a box from model input back to frame pixels.
    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x0 * sx, self.y0 * sy, self.x1 * sx, self.y1 * sy)
    }
}

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A cell of a feature map with stride `stride`, placed at the cell center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridLocation {
    ix: usize,
    iy: usize,
    stride: usize,
}

impl GridLocation {
    /// Panics on a zero stride.
    pub fn new(ix: usize, iy: usize, stride: usize) -> Self {
        assert!(stride >= 1, "stride must be at least 1");
        Self { ix, iy, stride }
    }

    pub fn ix(&self) -> usize {
        self.ix
    }

    pub fn iy(&self) -> usize {
        self.iy
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn x(&self) -> f64 {
        self.stride as f64 / 2.0 + (self.ix * self.stride) as f64
    }

    pub fn y(&self) -> f64 {
        self.stride as f64 / 2.0 + (self.iy * self.stride) as f64
    }
}

/// Distances from a location to the left, top, right and bottom box edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionVector {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl RegressionVector {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn is_positive(&self) -> bool {
        self.to_array().iter().all(|&c| c > 0.0 && c.is_finite())
    }
}

/// Ground-truth regression vector for a location strictly inside `gt`.
pub fn regression_targets(
    loc: &GridLocation,
    gt: &BoundingBox,
) -> Result<RegressionVector, GeometryError> {
    let (x, y) = (loc.x(), loc.y());
    if !gt.contains_strictly(x, y) {
        return Err(GeometryError::LocationOutsideBox { x, y });
    }
    Ok(RegressionVector::new(x - gt.x0, y - gt.y0, gt.x1 - x, gt.y1 - y))
}

/// Inverse of [`regression_targets`].
///
/// The result is clamped to the image origin, and to `bounds = (width, height)`
/// when given.
pub fn decode_box(
    loc: &GridLocation,
    v: &RegressionVector,
    bounds: Option<(f64, f64)>,
) -> Result<BoundingBox, GeometryError> {
    if !v.is_positive() {
        return Err(GeometryError::DegeneratePrediction(v.to_array()));
    }
    let (x, y) = (loc.x(), loc.y());
    let (mut x0, mut y0, mut x1, mut y1) = (x - v.l, y - v.t, x + v.r, y + v.b);
    x0 = x0.max(0.0);
    y0 = y0.max(0.0);
    if let Some((w, h)) = bounds {
        x1 = x1.min(w);
        y1 = y1.min(h);
    }
    BoundingBox::new(x0, y0, x1, y1)
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`, in `[0, 1]`.
pub fn centerness_target(v: &RegressionVector) -> f64 {
    let lr = v.l.min(v.r) / v.l.max(v.r);
    let tb = v.t.min(v.b) / v.t.max(v.b);
    (lr * tb).max(0.0).sqrt()
}

/// All cell-center locations of an `h x w` map, row-major.
pub fn locations_for_map(h: usize, w: usize, stride: usize) -> Vec<GridLocation> {
    (0..h)
        .flat_map(|iy| (0..w).map(move |ix| GridLocation::new(ix, iy, stride)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts covered cells of a fine lattice; independent of the closed form.
    fn pixel_count_iou(a: &BoundingBox, b: &BoundingBox, cells_per_unit: usize) -> f64 {
        let step = 1.0 / cells_per_unit as f64;
        let xmax = a.x1().max(b.x1());
        let ymax = a.y1().max(b.y1());
        let nx = (xmax / step).ceil() as usize;
        let ny = (ymax / step).ceil() as usize;
        let (mut inter, mut union) = (0u64, 0u64);
        for j in 0..ny {
            let y = (j as f64 + 0.5) * step;
            for i in 0..nx {
                let x = (i as f64 + 0.5) * step;
                let ina = a.contains_strictly(x, y);
                let inb = b.contains_strictly(x, y);
                inter += (ina && inb) as u64;
                union += (ina || inb) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bb(0., 0., 4., 4.), &bb(0., 0., 4., 4.)), 1.0);
        assert_eq!(iou(&bb(0., 0., 1., 1.), &bb(5., 5., 6., 6.)), 0.0);
        let oracle = pixel_count_iou(&bb(0., 0., 2., 2.), &bb(1., 1., 3., 3.), 64);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        assert!((iou(&bb(0., 0., 2., 2.), &bb(1., 1., 3., 3.)) - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn iou_matches_pixel_counting_on_random_integer_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut rand_box = || {
                let x0 = rng.random_range(0..12) as f64;
                let y0 = rng.random_range(0..12) as f64;
                let w = rng.random_range(1..8) as f64;
                let h = rng.random_range(1..8) as f64;
                bb(x0, y0, x0 + w, y0 + h)
            };
            let (a, b) = (rand_box(), rand_box());
            // Integer boxes are resolved exactly by one sample per unit cell.
            let oracle = pixel_count_iou(&a, &b, 1);
            assert!((iou(&a, &b) - oracle).abs() < 1e-3, "{a:?} {b:?}");
            assert_eq!(iou(&a, &b), iou(&b, &a));
        }
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(BoundingBox::new(1., 0., 1., 2.).is_err());
        assert!(BoundingBox::new(-1., 0., 1., 2.).is_err());
        assert!(BoundingBox::new(0., 0., f64::NAN, 2.).is_err());
        assert!(serde_json::from_str::<BoundingBox>(r#"{"x0":3,"y0":0,"x1":1,"y1":1}"#).is_err());
    }

    #[test]
    fn regression_target_examples() {
        let gt = bb(0., 0., 4., 4.);
        let at_center = GridLocation::new(0, 0, 4);
        assert_eq!(
            regression_targets(&at_center, &gt).unwrap(),
            RegressionVector::new(2., 2., 2., 2.)
        );
        let loc = GridLocation::new(0, 1, 2);
        assert_eq!((loc.x(), loc.y()), (1.0, 3.0));
        assert_eq!(
            regression_targets(&loc, &gt).unwrap(),
            RegressionVector::new(1., 3., 3., 1.)
        );
        let outside = GridLocation::new(2, 0, 4);
        assert!(matches!(
            regression_targets(&outside, &gt),
            Err(GeometryError::LocationOutsideBox { .. })
        ));
    }

    #[test]
    fn decode_examples() {
        let loc = GridLocation::new(0, 0, 16);
        let b = decode_box(&loc, &RegressionVector::new(4., 4., 4., 4.), None).unwrap();
        assert_eq!(b, bb(4., 4., 12., 12.));

        let loc = GridLocation::new(0, 0, 4);
        let b = decode_box(&loc, &RegressionVector::new(5., 5., 5., 5.), Some((16., 16.))).unwrap();
        assert_eq!(b, bb(0., 0., 7., 7.));

        assert!(matches!(
            decode_box(&loc, &RegressionVector::new(0., 1., 1., 1.), None),
            Err(GeometryError::DegeneratePrediction(_))
        ));
    }

    #[test]
    fn decode_inverts_regression_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let stride = rng.random_range(1..17);
            let loc = GridLocation::new(rng.random_range(0..20), rng.random_range(0..20), stride);
            let gt = bb(
                (loc.x() - rng.random_range(0.01..50.0)).max(0.0),
                (loc.y() - rng.random_range(0.01..50.0)).max(0.0),
                loc.x() + rng.random_range(0.01..50.0),
                loc.y() + rng.random_range(0.01..50.0),
            );
            if !gt.contains_strictly(loc.x(), loc.y()) {
                continue;
            }
            let v = regression_targets(&loc, &gt).unwrap();
            let back = decode_box(&loc, &v, None).unwrap();
            for (p, q) in back.to_array().iter().zip(gt.to_array()) {
                assert!((p - q).abs() <= 1e-9 * q.abs().max(1.0));
            }
            checked += 1;
        }
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(&RegressionVector::new(2., 2., 2., 2.)), 1.0);
        assert_eq!(centerness_target(&RegressionVector::new(0., 2., 4., 2.)), 0.0);
        let c = centerness_target(&RegressionVector::new(1., 2., 3., 2.));
        assert!((c - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((c - 0.57735).abs() < 1e-5);
    }

    #[test]
    fn location_grid_examples() {
        let one = locations_for_map(1, 1, 8);
        assert_eq!((one[0].x(), one[0].y()), (4.0, 4.0));
        let four = locations_for_map(2, 2, 4);
        let xy: Vec<_> = four.iter().map(|l| (l.x(), l.y())).collect();
        assert_eq!(xy, vec![(2., 2.), (6., 2.), (2., 6.), (6., 6.)]);
    }

    proptest! {
        #[test]
        fn location_count_matches_shape(h in 1usize..40, w in 1usize..40, stride in 1usize..32) {
            let locs = locations_for_map(h, w, stride);
            prop_assert_eq!(locs.len(), h * w);
            for (i, l) in locs.iter().enumerate() {
                prop_assert_eq!(l.iy() * w + l.ix(), i);
                prop_assert_eq!(l.x(), stride as f64 / 2.0 + (l.ix() * stride) as f64);
            }
        }

        #[test]
        fn centerness_is_bounded_and_peaks_at_center(
            l in 0.01f64..100.0, t in 0.01f64..100.0, r in 0.01f64..100.0, b in 0.01f64..100.0,
        ) {
            let c = centerness_target(&RegressionVector::new(l, t, r, b));
            prop_assert!((0.0..=1.0).contains(&c));
            let centred = centerness_target(&RegressionVector::new(l, t, l, t));
            prop_assert_eq!(centred, 1.0);
        }

        #[test]
        fn centerness_decreases_toward_edge(
            half in 1.0f64..50.0, frac in 0.05f64..0.95, t in 0.5f64..20.0,
        ) {
            // Move the location left from the center along x: l shrinks, r grows.
            let d1 = half * frac;
            let d2 = half * (frac * 0.5);
            let near = centerness_target(&RegressionVector::new(half - d2, t, half + d2, t));
            let far = centerness_target(&RegressionVector::new(half - d1, t, half + d1, t));
            prop_assert!(far < near);
        }

        #[test]
        fn iou_symmetric_and_one_only_for_identical(
            a in (0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0),
            b in (0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0),
        ) {
            let a = bb(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let b = bb(b.0, b.1, b.0 + b.2, b.1 + b.3);
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            if a != b {
                prop_assert!(iou(&a, &b) < 1.0);
            }
        }
    }
}
