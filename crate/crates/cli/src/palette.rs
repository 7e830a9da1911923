//! Fixed colors for segmentation dumps, so label images are diffable.

use mmnets::tensor::{Shape, Tensor};

/// Class `k` is drawn with `PALETTE[k % 16]`; class 0 is background.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [255, 255, 255],
];

/// `(1, 3, h, w)` image in `[0, 1]` painting each label with its palette color.
pub fn colorize(labels: &[usize], h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, &k) in labels.iter().enumerate().take(plane) {
        for (ch, &v) in PALETTE[k % PALETTE.len()].iter().enumerate() {
            data[ch * plane + p] = f32::from(v) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_are_distinct_and_wrap() {
        let mut seen = PALETTE.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 16);
        let img = colorize(&[1, 17], 1, 2);
        assert_eq!(img.data()[0], img.data()[1]);
        assert_eq!(img.data()[0], 230.0 / 255.0);
    }
}
