use dsrt::masks::*;
use proptest::prelude::*;

/// One-based predicate: frame `t` sees token `s` iff `s <= r(t + W)`, clipped
/// to the sequence.
fn brute_force(tv: usize, r: usize, w: usize) -> Vec<bool> {
    let ta = r * tv;
    let mut bits = Vec::with_capacity(tv * ta);
    for t in 1..=tv {
        for s in 1..=ta {
            bits.push(s <= (r * (t + w)).min(ta));
        }
    }
    bits
}

#[test]
fn future_expanding_mask_matches_brute_force_everywhere() {
    for tv in 1..=64 {
        for r in 1..=8 {
            for w in 0..=8.min(tv) {
                let m = cross_modal_mask_v_from_a(&BlockLayout::new(1, r, tv, w).unwrap()).unwrap();
                assert_eq!((m.query_len(), m.key_len()), (tv, r * tv));
                assert!(m.bits() == brute_force(tv, r, w).as_slice(), "T_v={tv} r={r} W={w}");
                assert_eq!(strict_equivalence_check(&BlockLayout::new(1, r, tv, w).unwrap()), w == 0 || tv == 1);
            }
        }
    }
}

#[test]
fn one_frame_window_adds_one_frame_of_tokens_per_row() {
    for tv in 1..=16 {
        for r in 1..=8 {
            let l = BlockLayout::new(1, r, tv, 0).unwrap();
            let m0 = cross_modal_mask_v_from_a(&l).unwrap();
            let m1 = cross_modal_mask_v_from_a(&l.with_lookahead(1)).unwrap();
            let flipped = m0.bits().iter().zip(m1.bits()).filter(|(a, b)| a != b).count();
            assert_eq!(flipped, r * (tv - 1));
            let (b0, b1) = (encode_mask(&m0), encode_mask(&m1));
            let differing_bits: u32 = b0.iter().zip(&b1).map(|(a, b)| (a ^ b).count_ones()).sum();
            assert_eq!(differing_bits as usize, r * (tv - 1));
        }
    }
}

fn layouts() -> impl Strategy<Value = BlockLayout> {
    (1usize..=4, 1usize..=8, 1usize..=12).prop_flat_map(|(f, r, blocks)| {
        let tv = f * blocks;
        (0..=tv.min(8)).prop_map(move |w| BlockLayout::new(f, r, tv, w).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(128) })]

    #[test]
    fn revelation_is_monotone_and_nested(l in layouts()) {
        let m = cross_modal_mask_v_from_a(&l).unwrap();
        prop_assert!(m.is_monotone());
        prop_assert!(m.rows_are_prefixes());
        for s in 0..m.key_len() {
            let col: Vec<bool> = (0..m.query_len()).map(|t| m.get(t, s)).collect();
            prop_assert!(col.windows(2).all(|p| p[0] <= p[1]));
        }
        if l.lookahead < l.num_video_frames {
            let wider = cross_modal_mask_v_from_a(&l.with_lookahead(l.lookahead + 1)).unwrap();
            prop_assert!(m.is_subset_of(&wider));
        }
        let full = cross_modal_mask_v_from_a(&l.with_lookahead(l.num_video_frames)).unwrap();
        prop_assert_eq!(full.count_ones(), full.query_len() * full.key_len());
    }

    #[test]
    fn self_masks_follow_blocks(l in layouts()) {
        let (f, r) = (l.frames_per_block, l.tokens_per_frame);
        let v = self_mask(&l, Stream::Video).unwrap();
        for i in 0..l.num_video_frames {
            for j in 0..l.num_video_frames {
                prop_assert_eq!(v.get(i, j), j / f <= i / f);
            }
        }
        let a = self_mask(&l, Stream::Audio).unwrap();
        for i in 0..l.num_audio_tokens() {
            for j in 0..l.num_audio_tokens() {
                prop_assert_eq!(a.get(i, j), j / (r * f) <= i / (r * f));
            }
        }
        prop_assert!(v.is_monotone() && a.is_monotone());
    }

    #[test]
    fn audio_sees_video_up_to_its_block_minus_the_window(l in layouts()) {
        let (f, r, w) = (l.frames_per_block, l.tokens_per_frame, l.lookahead);
        let m = cross_modal_mask_a_from_v(&l).unwrap();
        for s in 0..l.num_audio_tokens() {
            let block_end = f * (s / (r * f) + 1);
            for t in 0..l.num_video_frames {
                prop_assert_eq!(m.get(s, t), t + w < block_end);
            }
        }
        if w == 0 && f == 1 {
            // one-based: token s sees frame t iff t <= ceil(s / r)
            for s in 1..=l.num_audio_tokens() {
                prop_assert_eq!(m.row_visible(s - 1), s.div_ceil(r));
            }
        }
        prop_assert!(m.is_monotone());
    }

    #[test]
    fn dump_and_load_round_trip(l in layouts(), which in 0usize..4) {
        let m = match which {
            0 => cross_modal_mask_v_from_a(&l).unwrap(),
            1 => cross_modal_mask_a_from_v(&l).unwrap(),
            2 => self_mask(&l, Stream::Video).unwrap(),
            _ => self_mask(&l, Stream::Audio).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.bin");
        dump_mask(&m, &path).unwrap();
        prop_assert_eq!(load_mask(&path).unwrap(), m.clone());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        prop_assert!(load_mask(&path).is_err());
    }
}
