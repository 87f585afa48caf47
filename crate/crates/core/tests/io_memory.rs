//! Writing a large cloud streams through a fixed buffer: live heap during
//! the write stays bounded regardless of point count.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicIsize, Ordering};

use orchard_graph::io::{read_cloud, write_cloud, CloudFormat};
use orchard_graph::{MatterClass, PointCloud, PointRecord};

struct Counting;

static LIVE: AtomicIsize = AtomicIsize::new(0);
static PEAK: AtomicIsize = AtomicIsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size() as isize, Ordering::SeqCst) + layout.size() as isize;
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size() as isize, Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

const N: usize = 1_000_000;
const LIMIT: isize = 8 << 20;

fn cloud() -> PointCloud {
    PointCloud::new(
        (0..N)
            .map(|i| {
                let f = i as f64;
                PointRecord::labeled(f * 1e-3, (f * 0.37).sin(), (f * 0.11).cos(), (i % 7) as i32 + 1, MatterClass::Leafy)
            })
            .collect(),
    )
    .unwrap()
}

fn peak_growth_while(f: impl FnOnce()) -> isize {
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    f();
    PEAK.load(Ordering::SeqCst) - base
}

// Both formats run in one test so no other test thread allocates meanwhile.
#[test]
fn million_point_write_has_bounded_heap() {
    let cloud = cloud();
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("c.csv", CloudFormat::Csv), ("c.bin", CloudFormat::Binary)] {
        let path = dir.path().join(name);
        let growth = peak_growth_while(|| write_cloud(&cloud, &path, format).unwrap());
        assert!(growth < LIMIT, "{name}: heap grew by {growth} bytes");
        let back = read_cloud(&path, format).unwrap();
        assert_eq!(back.len(), N);
        assert_eq!(back.points()[N - 1], cloud.points()[N - 1]);
    }
}
