#![no_main]

use d2d_core::io;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let pad = data.first().and_then(|&b| (b > 0).then_some(b as u32));
    let body = data.get(1..).unwrap_or_default();
    if let Ok(series) = io::read_counts(body, "fuzz", pad) {
        let mut buf = Vec::new();
        io::write_counts(&mut buf, &series).unwrap();
        assert_eq!(io::read_counts(buf.as_slice(), "fuzz", None).unwrap(), series);
    }
});
