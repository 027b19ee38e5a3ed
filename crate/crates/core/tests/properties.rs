use proptest::prelude::*;

use vlmfp::imgproc::{select_tile_plan, PreprocessConfig};
use vlmfp::tokenizer::{detokenize, encode_prompt, tokenize, ChatMessage, ChatPart, Vocab};
use vlmfp::tokenred::{pixel_unshuffle, PatchGrid};
use vlmfp::transfer::{pack, BufferView, DType, HostArena};

/// Exhaustive argmin of the log aspect distance.
fn plan_oracle(w: u32, h: u32, max_tiles: u32) -> (u32, u32) {
    let target = (f64::from(w) / f64::from(h)).ln();
    let mut best: Option<(f64, u32, u32)> = None;
    for rows in 1..=max_tiles {
        for cols in 1..=max_tiles {
            if rows * cols > max_tiles {
                continue;
            }
            let d = (target - (f64::from(cols) / f64::from(rows)).ln()).abs();
            let take = match best {
                None => true,
                Some((bd, br, bc)) => {
                    if (d - bd).abs() > 1e-13 {
                        d < bd
                    } else {
                        (rows * cols, rows) < (br * bc, br)
                    }
                }
            };
            if take {
                best = Some((d, rows, cols));
            }
        }
    }
    let (_, r, c) = best.unwrap();
    (r, c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn plan_matches_exhaustive_oracle(w in 1u32..8192, h in 1u32..8192, max_tiles in 1u32..=12) {
        let cfg = PreprocessConfig { max_tiles, ..Default::default() };
        let p = select_tile_plan(w, h, &cfg);
        prop_assert_eq!((p.rows, p.cols), plan_oracle(w, h, max_tiles));
        prop_assert_eq!(p.include_thumbnail, p.rows * p.cols > 1);
        prop_assert_eq!((p.resized_width, p.resized_height), (p.cols * 448, p.rows * 448));
    }

    #[test]
    fn tokenize_round_trips(s in any::<String>()) {
        let v = Vocab::builtin();
        prop_assert_eq!(detokenize(&tokenize(&s, &v), &v).unwrap(), s);
    }

    #[test]
    fn compact_and_naive_ids_agree(
        text in "[a-z ?.<|]{0,40}",
        tiles in prop::collection::vec(1u32..=13, 0..3),
        answer in proptest::option::of("[a-z ]{1,20}"),
    ) {
        let v = Vocab::builtin();
        let mut parts = vec![ChatPart::Text(text)];
        parts.extend(tiles.iter().map(|&t| ChatPart::Image { tiles: t }));
        let mut msgs = vec![ChatMessage::user(parts)];
        if let Some(a) = answer {
            msgs.push(ChatMessage::assistant(a));
        }
        let c = encode_prompt(&msgs, &v, 64, true).unwrap();
        let n = encode_prompt(&msgs, &v, 64, false).unwrap();
        prop_assert_eq!(&c, &n);
        prop_assert_eq!(c.visual_len(), tiles.iter().map(|&t| t as usize * 64).sum::<usize>());
        let t = c.first_assistant_index;
        prop_assert!(c.supervision_mask[..t.min(c.len())].iter().all(|m| !m));
        prop_assert_eq!(c.supervision_mask.iter().filter(|m| **m).count(), c.len() - t - c.header_len);
    }

    #[test]
    fn unshuffle_composes(h in 1usize..=2, w in 1usize..=2, d in 1usize..=3, seed in any::<u64>()) {
        // Grid of (4h, 4w); unshuffle by 2 twice versus once by 4.
        let (hh, ww) = (4 * h, 4 * w);
        let data: Vec<f32> = (0..hh * ww * d).map(|i| (i as u64 ^ seed) as f32).collect();
        let g = PatchGrid::new(hh, ww, d, data).unwrap();
        let twice = pixel_unshuffle(&pixel_unshuffle(&g, 2).unwrap(), 2).unwrap();
        let once = pixel_unshuffle(&g, 4).unwrap();
        prop_assert_eq!((twice.h(), twice.w(), twice.d()), (once.h(), once.w(), once.d()));
        // Channel blocks of `twice` are ordered (a2, b2, a1, b1); of `once`
        // (a, b) with a = 2·a2 + a1.
        for i in 0..once.h() {
            for j in 0..once.w() {
                let (t, o) = (twice.cell(i, j), once.cell(i, j));
                for a2 in 0..2 {
                    for b2 in 0..2 {
                        for a1 in 0..2 {
                            for b1 in 0..2 {
                                let tk = ((a2 * 2 + b2) * 4 + (a1 * 2 + b1)) * d;
                                let ok = ((2 * a2 + a1) * 4 + (2 * b2 + b1)) * d;
                                prop_assert_eq!(&t[tk..tk + d], &o[ok..ok + d]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pack_round_trips(sizes in prop::collection::vec(1usize..300, 1..10), align_pow in 0u32..8) {
        let align = 1usize << align_pow;
        let bufs: Vec<Vec<u8>> = sizes.iter().enumerate().map(|(k, &n)| (0..n).map(|i| (i * 31 + k) as u8).collect()).collect();
        let views: Vec<BufferView> = bufs.iter().map(|b| BufferView::new(DType::Uint8, vec![b.len()], b).unwrap()).collect();
        let mut arena = HostArena::new(1 << 16, align).unwrap();
        let batch = pack(&views, &mut arena).unwrap();
        let mut end = 0;
        for e in &batch.entries {
            prop_assert_eq!(e.offset % align, 0);
            prop_assert!(e.offset >= end);
            end = e.offset + e.len;
            prop_assert!(end <= batch.payload.len());
        }
        let back = batch.unpack();
        for (h, b) in back.iter().zip(&bufs) {
            prop_assert_eq!(&h.bytes, b);
        }
    }
}
