use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel-aligned rectangle: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Row-major pixel indices of the rect inside an image `image_width` wide.
    pub fn pixels(&self, image_width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.y..self.y + self.height).flat_map(move |r| (r * image_width + self.x)..(r * image_width + self.x + self.width))
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.width <= width && self.y + self.height <= height
    }
}

/// Tiling of an image into `cols x rows` crops, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropGrid {
    pub width: usize,
    pub height: usize,
    pub cols: usize,
    pub rows: usize,
    pub rects: Vec<Rect>,
}

impl CropGrid {
    pub fn crops(&self) -> usize {
        self.cols * self.rows
    }

    /// `(col, row)` of crop index `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i % self.cols, i / self.cols)
    }

    /// Unit id of crop `i` of image `image`.
    pub fn unit_id(&self, image: usize, i: usize) -> usize {
        image * self.crops() + i
    }

    /// `(image, crop index)` of a unit id.
    pub fn locate(&self, unit_id: usize) -> (usize, usize) {
        (unit_id / self.crops(), unit_id % self.crops())
    }
}

/// Split `(width, height)` into a `cols x rows` grid of equal crops; the
/// last column and row absorb any remainder.
pub fn make_grid((width, height): (usize, usize), cols: usize, rows: usize) -> Result<CropGrid> {
    if cols == 0 || rows == 0 || width < cols || height < rows {
        return Err(Error::Config(format!("cannot split {width}x{height} into a {cols}x{rows} grid")));
    }
    let (cw, ch) = (width / cols, height / rows);
    let mut rects = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            rects.push(Rect {
                x: c * cw,
                y: r * ch,
                width: if c + 1 == cols { width - c * cw } else { cw },
                height: if r + 1 == rows { height - r * ch } else { ch },
            });
        }
    }
    Ok(CropGrid {
        width,
        height,
        cols,
        rows,
        rects,
    })
}

/// Pixels of one image whose ground truth has been purchased.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropLabelMask {
    width: usize,
    mask: Vec<bool>,
}

impl CropLabelMask {
    pub fn new(width: usize, height: usize) -> Self {
        CropLabelMask {
            width,
            mask: vec![false; width * height],
        }
    }

    pub fn purchase(&mut self, rect: &Rect) -> Result<()> {
        let height = self.mask.len() / self.width.max(1);
        if !rect.fits(self.width, height) {
            return Err(Error::Bounds(format!("{rect:?} lies outside a {}x{height} image", self.width)));
        }
        for p in rect.pixels(self.width) {
            self.mask[p] = true;
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn any(&self) -> bool {
        self.mask.iter().any(|&b| b)
    }
}

/// Per-class intersection over union and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; 0 when none is present.
    pub mean: f64,
}

pub fn per_class_iou(pred: &[u8], truth: &[u8], classes: usize) -> IouReport {
    assert_eq!(pred.len(), truth.len(), "prediction and ground truth differ in size");
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouReport { per_class, mean }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = make_grid((1280, 720), 4, 3).unwrap();
        assert!(g.rects.iter().all(|r| (r.width, r.height) == (320, 240)));
        let g = make_grid((64, 48), 4, 3).unwrap();
        assert!(g.rects.iter().all(|r| (r.width, r.height) == (16, 16)));
        let g = make_grid((65, 48), 4, 3).unwrap();
        assert_eq!(g.rects[3].width, 17);
        assert_eq!(g.rects[11], Rect { x: 48, y: 32, width: 17, height: 16 });
        assert!(matches!(make_grid((3, 48), 4, 3), Err(Error::Config(_))));
    }

    #[test]
    fn grid_tiles_every_pixel_once() {
        for (w, h) in [(64, 48), (65, 50), (4, 3), (37, 11)] {
            let g = make_grid((w, h), 4, 3).unwrap();
            let mut hits = vec![0; w * h];
            for r in &g.rects {
                r.pixels(w).for_each(|p| hits[p] += 1);
            }
            assert!(hits.iter().all(|&c| c == 1), "{w}x{h}");
        }
    }

    #[test]
    fn iou_cases() {
        let t = [0u8, 1, 1, 2];
        let r = per_class_iou(&t, &t, 4);
        assert_eq!(r.per_class, [Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(r.mean, 1.0);
        let r = per_class_iou(&[1, 1], &[0, 0], 2);
        assert_eq!(r.per_class, [Some(0.0), Some(0.0)]);
    }

    #[test]
    fn half_overlapping_rectangles() {
        // 8x4 image; truth rect covers columns 0..4, prediction columns 2..6.
        let (w, h) = (8, 4);
        let paint = |x0: usize| {
            let mut m = vec![0u8; w * h];
            Rect { x: x0, y: 0, width: 4, height: h }.pixels(w).for_each(|p| m[p] = 1);
            m
        };
        let (truth, pred) = (paint(0), paint(2));
        let inter = truth.iter().zip(&pred).filter(|(a, b)| **a == 1 && **b == 1).count();
        let union = truth.iter().zip(&pred).filter(|(a, b)| **a == 1 || **b == 1).count();
        let r = per_class_iou(&pred, &truth, 2);
        assert_eq!(r.per_class[1], Some(inter as f64 / union as f64));
        assert!((r.per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn purchased_region_is_a_union_of_crops() {
        let g = make_grid((10, 6), 2, 2).unwrap();
        let mut m = CropLabelMask::new(10, 6);
        assert!(!m.any());
        m.purchase(&g.rects[3]).unwrap();
        assert_eq!(m.as_slice().iter().filter(|&&b| b).count(), g.rects[3].area());
        assert!(matches!(m.purchase(&Rect { x: 8, y: 0, width: 3, height: 1 }), Err(Error::Bounds(_))));
    }
}
