//! Popcount helpers with runtime dispatch to the hardware instruction.
//!
//! `u64::count_ones` lowers to a bit-twiddling sequence unless the target
//! enables `popcnt`. Hot kernels are written as `#[inline(always)]` bodies
//! and wrapped by [`with_popcnt!`] so a copy compiled with the feature is
//! selected at run time.

#[inline(always)]
pub(crate) fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
#[inline]
pub(crate) fn has_popcnt() -> bool {
    std::is_x86_feature_detected!("popcnt")
}

/// Defines `$name` as a dispatching wrapper around the inline body `$body`.
macro_rules! with_popcnt {
    ($vis:vis fn $name:ident $(<$($lt:lifetime),*>)? ($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)? => $body:path) => {
        $vis fn $name $(<$($lt),*>)? ($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "popcnt")]
                unsafe fn fast $(<$($lt),*>)? ($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                if $crate::bitcore::popcnt::has_popcnt() {
                    // SAFETY: the CPU supports popcnt, checked just above.
                    return unsafe { fast($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

pub(crate) use with_popcnt;
