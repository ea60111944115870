//! Training-time input augmentation.

use rand::Rng;

use crate::image::Image;

/// Crop padding at full image size.
pub const CROP_PAD: usize = 4;
pub const ERASE_FILL: f64 = 0.5;
pub const TEXT_SELECT_P: f64 = 0.15;
/// Share of selected tokens replaced by the mask id; the rest get a random id.
pub const TEXT_MASK_SHARE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextVocab {
    pub size: usize,
    pub mask_id: usize,
    /// Ids below this are flags and never drawn as replacements.
    pub first_word: usize,
}

/// Horizontal flip with probability ½, pad-by-`pad`-then-random-crop, then
/// random erasing with probability ½ of a rectangle covering 2–33% of the
/// area.
pub fn augment_image<R: Rng + ?Sized>(image: &Image, pad: usize, rng: &mut R) -> Image {
    let mut img = if rng.random_bool(0.5) { image.flip_horizontal() } else { image.clone() };
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    img = img.pad_crop(pad, dy, dx);
    if rng.random_bool(0.5) {
        random_erase(&mut img, rng);
    }
    img
}

fn random_erase<R: Rng + ?Sized>(img: &mut Image, rng: &mut R) {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(0.02..0.33);
        let aspect = rng.random_range(0.3f64.ln()..(1.0f64 / 0.3).ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        img.fill_rect(y0, x0, eh, ew, ERASE_FILL);
        return;
    }
}

/// Masks or replaces each non-flag token independently. The first and last
/// positions hold the begin/end flags and are never touched.
pub fn augment_text<R: Rng + ?Sized>(ids: &[usize], vocab: TextVocab, rng: &mut R) -> Vec<usize> {
    let mut out = ids.to_vec();
    let n = out.len();
    if n <= 2 {
        return out;
    }
    for t in &mut out[1..n - 1] {
        if rng.random_bool(TEXT_SELECT_P) {
            *t = if rng.random_bool(TEXT_MASK_SHARE) {
                vocab.mask_id
            } else {
                rng.random_range(vocab.first_word..vocab.size)
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seeded_augmentation_repeats() {
        let img = Image::new(8, 4, 1, (0..32).map(|i| i as f64 / 32.0).collect()).unwrap();
        let a = augment_image(&img, CROP_PAD, &mut ChaCha8Rng::seed_from_u64(4));
        let b = augment_image(&img, CROP_PAD, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (8, 4));
    }

    #[test]
    fn flags_survive_text_augmentation() {
        let vocab = TextVocab { size: 64, mask_id: 2, first_word: 3 };
        let ids = vec![0, 10, 11, 12, 13, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let out = augment_text(&ids, vocab, &mut rng);
            assert_eq!(out[0], 0);
            assert_eq!(out[5], 1);
            assert!(out[1..5].iter().all(|&t| (2..64).contains(&t)));
        }
    }
}
