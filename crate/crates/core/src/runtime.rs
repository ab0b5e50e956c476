//! Process-level tuning for long numeric runs.

/// Stops glibc from returning freed heap pages to the kernel between passes.
///
/// Every forward and backward pass allocates and frees tens of megabytes of
/// scratch buffers; with the default thresholds those pages are unmapped and
/// faulted back in on each pass, which costs about a third of the runtime.
/// Call once at startup, before spawning worker threads. No-op on other
/// platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        // 32 MiB is the largest mmap threshold glibc accepts
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
