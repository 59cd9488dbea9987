#![no_main]

use d2d_core::io;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = io::read_bands(data, "fuzz");
});
