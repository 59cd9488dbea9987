#![no_main]

use d2d_core::io;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(trajs) = io::read_trajectories(data, "fuzz", |od| (od < 8).then_some(od as usize + 2)) {
        let mut buf = Vec::new();
        io::write_trajectories(&mut buf, &trajs).unwrap();
        let again = io::read_trajectories(buf.as_slice(), "fuzz", |od| (od < 8).then_some(od as usize + 2)).unwrap();
        assert_eq!(trajs, again);
    }
});
