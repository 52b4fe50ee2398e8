//! C ABI surface (placeholder during bring-up).
