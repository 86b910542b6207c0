#pragma once

namespace ambient {

/// Keeps large activation buffers on the heap instead of fresh mmap pages.
/// Training allocates and frees many same-sized tensors per step; with glibc
/// defaults each one is a new mapping and page faults dominate. Safe to call
/// more than once; a no-op on non-glibc platforms.
void tune_allocator();

}  // namespace ambient
