use proptest::prelude::*;

use secvit_cli::ppm::{cluster_map, palette, parse_ppm};

proptest! {
    #[test]
    fn cluster_maps_parse_back(rows in 1usize..8, cols in 1usize..8, block in 1usize..4, seed: u64) {
        let ids: Vec<usize> = (0..rows * cols).map(|i| (i as u64).wrapping_mul(seed | 1) as usize % 40).collect();
        let bytes = cluster_map(&ids, rows, cols, block).unwrap();
        let (w, h, px) = parse_ppm(&bytes).unwrap();
        prop_assert_eq!((w, h), (cols * block, rows * block));
        let pal = palette();
        for y in 0..h {
            for x in 0..w {
                let id = ids[(y / block) * cols + x / block];
                prop_assert_eq!(&px[(y * w + x) * 3..(y * w + x) * 3 + 3], &pal[id % 32][..]);
            }
        }
    }

    #[test]
    fn truncated_images_are_rejected(cut in 1usize..12) {
        let bytes = cluster_map(&[0, 1, 2, 3], 2, 2, 1).unwrap();
        prop_assert!(parse_ppm(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
    }
}
