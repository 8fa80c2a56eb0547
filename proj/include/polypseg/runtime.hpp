#pragma once

namespace polypseg {

/// Keeps large activation buffers on the heap instead of fresh mmaps, which
/// otherwise dominate step time through page faults. No-op off glibc.
void tune_allocator();

}  // namespace polypseg
