//! Collage test-case generators and invariant checks shared by the property
//! suite and the acceptance runner.

#![allow(dead_code)]

use std::collections::HashMap;

use dynscale::geometry::SUBPIXEL;
use dynscale::{
    canvas_for, compose_collage, plan_collage, AnnotationId, BoundingBox, CategoryId, CollageK,
    CollagePlan, ImageId, ImageRecord, InstanceAnnotation, PixelBuffer, TINY_BOX_AREA,
};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

#[derive(Debug)]
pub struct Case {
    pub k: CollageK,
    pub sources: Vec<ImageRecord>,
    pub pixels: HashMap<ImageId, PixelBuffer>,
}

impl Case {
    pub fn refs(&self) -> Vec<&ImageRecord> {
        self.sources.iter().collect()
    }

    pub fn plan(&self) -> CollagePlan {
        let refs = self.refs();
        plan_collage(&refs, self.k, canvas_for(&refs, self.k)).unwrap()
    }

    pub fn annotations(&self) -> HashMap<ImageId, Vec<InstanceAnnotation>> {
        self.sources
            .iter()
            .map(|s| (s.id, s.annotations.clone()))
            .collect()
    }
}

pub fn arb_k() -> impl Strategy<Value = CollageK> {
    prop_oneof![
        Just(CollageK::ONE),
        Just(CollageK::FOUR),
        Just(CollageK::NINE)
    ]
}

/// A box strictly inside a `w` x `h` image, with fractional coordinates.
pub fn arb_box(w: u32, h: u32) -> impl Strategy<Value = BoundingBox> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(move |(fx, fy, fw, fh)| {
        let (w, h) = (w as f64, h as f64);
        let x = fx * (w - 0.5);
        let y = fy * (h - 0.5);
        let bw = 0.25 + fw * (w - x - 0.25);
        let bh = 0.25 + fh * (h - y - 0.25);
        BoundingBox::new(x, y, bw, bh).unwrap()
    })
}

pub fn arb_source(id: u64, max_side: u32) -> impl Strategy<Value = (ImageRecord, PixelBuffer)> {
    (1..=max_side, 1..=max_side)
        .prop_flat_map(move |(w, h)| {
            (
                Just((w, h)),
                prop::collection::vec(arb_box(w, h), 0..6),
                prop::collection::vec(any::<u8>(), (w * h * 3) as usize),
            )
        })
        .prop_map(move |((w, h), boxes, data)| {
            let annotations = boxes
                .into_iter()
                .enumerate()
                .map(|(i, bbox)| InstanceAnnotation {
                    id: AnnotationId(id * 100 + i as u64),
                    image_id: ImageId(id),
                    bbox,
                    category_id: CategoryId(1),
                    iscrowd: false,
                })
                .collect();
            let record = ImageRecord {
                id: ImageId(id),
                width: w,
                height: h,
                file_name: format!("{id}.png"),
                annotations,
            };
            (record, PixelBuffer::from_raw(w, h, 3, data).unwrap())
        })
}

pub fn arb_case_with(
    k: impl Strategy<Value = CollageK>,
    max_side: u32,
) -> impl Strategy<Value = Case> {
    k.prop_flat_map(move |k| {
        let sources: Vec<_> = (1..=k.get() as u64)
            .map(|id| arb_source(id, max_side))
            .collect();
        (Just(k), sources)
    })
    .prop_map(|(k, parts)| {
        let mut sources = Vec::new();
        let mut pixels = HashMap::new();
        for (rec, px) in parts {
            pixels.insert(rec.id, px);
            sources.push(rec);
        }
        Case { k, sources, pixels }
    })
}

pub fn arb_case() -> impl Strategy<Value = Case> {
    arb_case_with(arb_k(), 48)
}

pub fn check_area(case: &Case) -> Result<(), TestCaseError> {
    let plan = case.plan();
    let k = case.k.get() as i128;
    for (src, cell) in case.sources.iter().zip(&plan.cells) {
        for a in &src.annotations {
            let out = a
                .bbox
                .downscale_translate(cell.divisor, cell.offset_x, cell.offset_y);
            prop_assert_eq!(out.exact_area().raw() * k, a.bbox.exact_area().raw());
        }
    }
    Ok(())
}

pub fn check_aspect(case: &Case) -> Result<(), TestCaseError> {
    let plan = case.plan();
    for (src, cell) in case.sources.iter().zip(&plan.cells) {
        for a in &src.annotations {
            let [_, _, w_in, h_in] = a.bbox.raw_xywh();
            let out = a
                .bbox
                .downscale_translate(cell.divisor, cell.offset_x, cell.offset_y);
            let [_, _, w_out, h_out] = out.raw_xywh();
            prop_assert_eq!(w_out as i128 * h_in as i128, w_in as i128 * h_out as i128);
        }
    }
    Ok(())
}

pub fn check_containment(case: &Case) -> Result<(), TestCaseError> {
    let plan = case.plan();
    let result = compose_collage(&plan, &case.pixels, &case.annotations(), false).unwrap();
    let (cw, ch) = plan.cell_size();
    for a in &result.annotations {
        let cell = plan
            .cells
            .iter()
            .find(|c| c.source_image_id == a.image_id)
            .unwrap();
        let [x, y, w, h] = a.bbox.raw_xywh();
        let (x0, y0) = (
            cell.offset_x as i64 * SUBPIXEL,
            cell.offset_y as i64 * SUBPIXEL,
        );
        prop_assert!(x >= x0 && y >= y0);
        prop_assert!(x + w <= x0 + cw as i64 * SUBPIXEL);
        prop_assert!(y + h <= y0 + ch as i64 * SUBPIXEL);
    }
    Ok(())
}

pub fn check_count_conservation(case: &Case, tiny: bool) -> Result<(), TestCaseError> {
    let plan = case.plan();
    let result = compose_collage(&plan, &case.pixels, &case.annotations(), tiny).unwrap();
    let total: usize = case.sources.iter().map(|s| s.annotations.len()).sum();
    prop_assert_eq!(result.annotations.len() + result.dropped_tiny, total);

    // Oracle: a box is dropped iff its raw area divided by k is below 100 px^2.
    let limit = (TINY_BOX_AREA as i128) * (SUBPIXEL as i128) * (SUBPIXEL as i128);
    let k = case.k.get() as i128;
    let expected_drops = if tiny {
        case.sources
            .iter()
            .flat_map(|s| &s.annotations)
            .filter(|a| a.bbox.exact_area().raw() < limit * k)
            .count()
    } else {
        0
    };
    prop_assert_eq!(result.dropped_tiny, expected_drops);
    Ok(())
}

pub fn check_k1_identity(case: &Case) -> Result<(), TestCaseError> {
    let plan = case.plan();
    let result = compose_collage(&plan, &case.pixels, &case.annotations(), false).unwrap();
    let src = &case.sources[0];
    prop_assert_eq!(&result.pixels, &case.pixels[&src.id]);
    prop_assert_eq!(&result.annotations, &src.annotations);
    Ok(())
}

pub fn check_pixels(case: &Case) -> Result<(), TestCaseError> {
    let plan = case.plan();
    let a = compose_collage(&plan, &case.pixels, &case.annotations(), false).unwrap();
    let b = compose_collage(&plan, &case.pixels, &case.annotations(), false).unwrap();
    prop_assert_eq!(a.pixels.as_bytes(), b.pixels.as_bytes());

    // Oracle: nearest neighbour at src = dst * side, black outside the source.
    let side = case.k.side();
    let (cw, ch) = plan.cell_size();
    for cell in &plan.cells {
        let src = &case.pixels[&cell.source_image_id];
        for dy in 0..ch {
            for dx in 0..cw {
                let (sx, sy) = (dx * side, dy * side);
                let got = a.pixels.pixel(cell.offset_x + dx, cell.offset_y + dy);
                if sx < src.width() && sy < src.height() {
                    prop_assert_eq!(got, src.pixel(sx, sy));
                } else {
                    prop_assert_eq!(got, &[0u8, 0, 0][..]);
                }
            }
        }
    }
    Ok(())
}
