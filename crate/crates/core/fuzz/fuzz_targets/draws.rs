#![no_main]

use d2d_core::{io, sampler::Diagnostics};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(draws) = io::read_draws(data, "fuzz") {
        let _ = Diagnostics::compute(&draws);
        let mut buf = Vec::new();
        io::write_draws(&mut buf, &draws).unwrap();
        assert_eq!(io::read_draws(buf.as_slice(), "fuzz").unwrap().samples, draws.samples);
    }
});
