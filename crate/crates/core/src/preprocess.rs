//! Input preprocessing: 3x3 median filter followed by min-max scaling.

use crate::model::GrayImage;

/// 3x3 median with edge replication.
pub fn median_filter3(img: &GrayImage) -> GrayImage {
    let (h, w) = img.dims();
    if h == 0 || w == 0 {
        return img.clone();
    }
    let mut out = Vec::with_capacity(h * w);
    let mut window = [0.0f32; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for ny in [y.saturating_sub(1), y, (y + 1).min(h - 1)] {
                for nx in [x.saturating_sub(1), x, (x + 1).min(w - 1)] {
                    window[k] = img.get(nx, ny);
                    k += 1;
                }
            }
            let (_, median, _) = window.select_nth_unstable_by(4, f32::total_cmp);
            out.push(*median);
        }
    }
    GrayImage::new(h, w, out).expect("median output has input dimensions")
}

/// `(v - min) / (max - min)`; constant images map to zeros.
pub fn minmax_scale(img: &GrayImage) -> GrayImage {
    let (h, w) = img.dims();
    let Some((lo, hi)) = img.min_max() else {
        return img.clone();
    };
    let range = hi as f64 - lo as f64;
    let data = if range > 0.0 {
        img.data()
            .iter()
            .map(|&v| (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; h * w]
    };
    GrayImage::new(h, w, data).expect("scaled output has input dimensions")
}

/// Median filter then min-max scaling.
pub fn preprocess(img: &GrayImage) -> GrayImage {
    minmax_scale(&median_filter3(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_fixed_point() {
        let img = GrayImage::filled(5, 4, 0.3);
        assert_eq!(median_filter3(&img), img);
        let zero = GrayImage::zeros(3, 3);
        assert_eq!(median_filter3(&median_filter3(&zero)), zero);
    }

    #[test]
    fn isolated_spike_removed() {
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let img = GrayImage::new(5, 5, data).unwrap();
        assert!(median_filter3(&img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_replication_at_corner() {
        // corner window replicates row/column 0: values {1,1,2,1,1,2,3,3,4}
        let img = GrayImage::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(median_filter3(&img).get(0, 0), 2.0);
    }

    #[test]
    fn minmax_values() {
        let img = GrayImage::new(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(minmax_scale(&img).data(), &[0.0, 0.5, 1.0]);
        let flat = GrayImage::filled(2, 2, 7.0);
        assert!(minmax_scale(&flat).data().iter().all(|&v| v == 0.0));
    }
}
