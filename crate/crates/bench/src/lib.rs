//! Fixtures shared by the benchmarks under `benches/`.

use semcon_core::{ClientId, ResponseRecord};

const WORDS: [&str; 12] = [
    "the", "sky", "is", "blue", "because", "of", "rayleigh", "scattering", "light", "short", "waves", "air",
];

/// `k` responses to one prompt; every third one is an outlier, the rest are
/// close paraphrases.
pub fn responses(k: usize) -> Vec<ResponseRecord> {
    (0..k)
        .map(|i| {
            let text = if i % 3 == 2 {
                format!("unrelated answer number {i} about cooking pasta")
            } else {
                let mut words = WORDS;
                let at = i % (WORDS.len() - 1);
                words.swap(at, at + 1);
                words.join(" ")
            };
            ResponseRecord::new(ClientId(i as u32), "p0", text)
        })
        .collect()
}
