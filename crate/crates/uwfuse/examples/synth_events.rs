//! Synthetic event maps from grayscale frames: threshold the pixel-wise
//! change between consecutive frames, cap per-pixel activity, then pool
//! into a feature vector with the toy encoder.
//!
//! Run with: cargo run -p uwfuse --example synth_events

use uwfuse::events::{synth_events, toy_event_encoder, EventOptions, FrameSequence};

fn main() {
    // A bright 2x2 block sweeps across an 8x8 frame, one column per frame.
    let (frames, h, w) = (8usize, 8usize, 8usize);
    let mut bytes = vec![20u8; frames * h * w];
    for f in 0..frames {
        for dr in 0..2 {
            for dc in 0..2 {
                let (r, c) = (3 + dr, (f + dc) % w);
                bytes[(f * h + r) * w + c] = 220;
            }
        }
    }
    let clip = FrameSequence::from_bytes(&bytes, frames, h, w).unwrap();

    let opts = EventOptions::default(); // threshold 10/255, clamp 10
    let segments = synth_events(&clip, &opts).unwrap();
    let seg = &segments[0];
    println!(
        "{} segment(s); first has {} event maps of {}x{}",
        segments.len(),
        seg.pairs(),
        seg.height(),
        seg.width()
    );
    println!("\nevent map for the first frame pair (rows 2..6):");
    for r in 2..6 {
        let mut line = String::new();
        for c in 0..w {
            line.push(if seg.at(0, r, c) == 1 { '#' } else { '.' });
        }
        println!("  {line}");
    }

    let features = toy_event_encoder(seg, 8).unwrap();
    println!("\npooled event rates over 8 row-major cells:");
    for (i, f) in features.iter().enumerate() {
        println!("  cell {i}: {f:.4}");
    }
}
