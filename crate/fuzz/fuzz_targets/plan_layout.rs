#![no_main]
use dynimg::compose::{plan_layout, LayoutConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 7 {
        return;
    }
    let u = |i: usize| u16::from_le_bytes([data[i], data[i + 1]]) as usize;
    let strip = match data[6] & 1 {
        0 => None,
        _ => Some(data.get(7).copied().unwrap_or(0) as usize * 2),
    };
    let cfg = LayoutConfig { keyframe_size: u(0) % 4096, patch: u(2) % 64, n_prompts: u(4) % 64, prompt_strip_height: strip };
    if let Ok(l) = plan_layout(&cfg) {
        let (h, w) = l.total_size;
        assert_eq!(h % cfg.patch, 0);
        assert_eq!(w % cfg.patch, 0);
        assert_eq!(l.prompt_regions.len(), cfg.n_prompts);
    }
});
