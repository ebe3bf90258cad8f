use nudgeseg_core::flow::{decode_flo, encode_flo, read_flo, write_flo, FlowField};
use nudgeseg_core::hypothesis::SegmentationHypothesis;
use nudgeseg_core::raster::{decode_pgm, encode_pgm16, read_pgm, write_pgm16, Grid, LabelImage};
use nudgeseg_core::Error;
use proptest::prelude::*;

fn flow_strategy() -> impl Strategy<Value = FlowField> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
        prop::collection::vec((any::<f32>(), any::<f32>()), w * h).prop_map(move |uv| {
            let mut f = FlowField::zeros(w, h);
            for (i, (u, v)) in uv.into_iter().enumerate() {
                f.u[i] = u as f64;
                f.v[i] = v as f64;
            }
            f
        })
    })
}

fn image_strategy() -> impl Strategy<Value = LabelImage> {
    (1usize..40, 1usize..40)
        .prop_flat_map(|(w, h)| prop::collection::vec(any::<u16>(), w * h).prop_map(move |d| Grid::from_vec(w, h, d)))
}

fn bits(f: &FlowField) -> Vec<(u64, u64)> {
    f.u.iter().zip(&f.v).map(|(u, v)| (u.to_bits(), v.to_bits())).collect()
}

proptest! {
    #[test]
    fn flo_round_trip_is_bit_exact(f in flow_strategy()) {
        let bytes = encode_flo(&f);
        let back = decode_flo(&bytes).unwrap();
        prop_assert_eq!((back.width, back.height), (f.width, f.height));
        prop_assert_eq!(bits(&back), bits(&f));
        prop_assert_eq!(encode_flo(&back), bytes);
    }

    #[test]
    fn pgm_round_trip_is_bit_exact(img in image_strategy()) {
        let bytes = encode_pgm16(&img);
        let back = decode_pgm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_pgm16(&back), bytes);
    }

    #[test]
    fn truncated_flo_is_rejected(f in flow_strategy(), cut in 1usize..8) {
        let bytes = encode_flo(&f);
        prop_assert!(matches!(decode_flo(&bytes[..bytes.len() - cut]), Err(Error::Format(_))));
    }
}

#[test]
fn flo_header_layout() {
    let mut f = FlowField::zeros(3, 2);
    f.u[1] = 1.5;
    let b = encode_flo(&f);
    assert_eq!(&b[..4], b"PIEH");
    assert_eq!(i32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
    assert_eq!(i32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
    assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 1.5);
    assert_eq!(b.len(), 12 + 6 * 8);
}

#[test]
fn eight_bit_pgm_with_comment_is_widened() {
    let mut bytes = b"P5\n# made by hand\n3 1\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 7, 255]);
    let img = decode_pgm(&bytes).unwrap();
    assert_eq!(img.data, vec![0, 7, 255]);
}

#[test]
fn bad_magic_is_rejected() {
    assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
    assert!(matches!(decode_flo(b"XXXX\0\0\0\0\0\0\0\0"), Err(Error::Format(_))));
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = FlowField::zeros(4, 3);
    f.v[5] = -2.25;
    write_flo(dir.path().join("a.flo"), &f).unwrap();
    assert_eq!(read_flo(dir.path().join("a.flo")).unwrap(), f);

    let labels = Grid::from_vec(4, 3, (0..12u32).map(|v| v % 3).collect());
    let img = SegmentationHypothesis::from_labels(labels, 0).to_label_image().unwrap();
    write_pgm16(dir.path().join("a.pgm"), &img).unwrap();
    assert_eq!(read_pgm(dir.path().join("a.pgm")).unwrap(), img);
}
