//! All-pairs reference implementation of the contour metrics, written
//! independently of the library.

pub struct Grid<'a> {
    pub rows: usize,
    pub cols: usize,
    pub px: &'a [bool],
    pub spacing: [f64; 2],
}

impl Grid<'_> {
    fn at(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols && self.px[r as usize * self.cols + c as usize]
    }

    pub fn surface(&self) -> Vec<(isize, isize)> {
        let mut s = Vec::new();
        for r in 0..self.rows as isize {
            for c in 0..self.cols as isize {
                if self.at(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !self.at(r + dr, c + dc)) {
                    s.push((r, c));
                }
            }
        }
        s
    }
}

fn d2(a: (isize, isize), b: (isize, isize), sp: [f64; 2]) -> f64 {
    let y = (a.0 as f64 - b.0 as f64) * sp[0];
    let x = (a.1 as f64 - b.1 as f64) * sp[1];
    y * y + x * x
}

fn nearest(p: (isize, isize), set: &[(isize, isize)], sp: [f64; 2]) -> f64 {
    set.iter().map(|&q| d2(p, q, sp)).fold(f64::INFINITY, f64::min).sqrt()
}

pub fn dice(a: &Grid, b: &Grid) -> f64 {
    let na = a.px.iter().filter(|&&v| v).count();
    let nb = b.px.iter().filter(|&&v| v).count();
    let both = a.px.iter().zip(b.px).filter(|(x, y)| **x && **y).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn pooled(a: &Grid, b: &Grid) -> Option<Vec<f64>> {
    let (sa, sb) = (a.surface(), b.surface());
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let mut all: Vec<f64> = sa.iter().map(|&p| nearest(p, &sb, a.spacing)).collect();
    all.extend(sb.iter().map(|&p| nearest(p, &sa, a.spacing)));
    Some(all)
}

pub fn sdsc(a: &Grid, b: &Grid, tol: f64) -> f64 {
    let (ea, eb) = (a.surface().is_empty(), b.surface().is_empty());
    if ea && eb {
        return 1.0;
    }
    match pooled(a, b) {
        None => 0.0,
        Some(all) => all.iter().filter(|&&d| d <= tol).count() as f64 / all.len() as f64,
    }
}

pub fn hd95(a: &Grid, b: &Grid) -> f64 {
    let (ea, eb) = (a.surface().is_empty(), b.surface().is_empty());
    if ea && eb {
        return 0.0;
    }
    match pooled(a, b) {
        None => f64::INFINITY,
        Some(mut all) => {
            all.sort_by(|x, y| x.partial_cmp(y).unwrap());
            // smallest rank k with k / n >= 0.95
            let n = all.len();
            let k = (1..=n).find(|&k| 100 * k >= 95 * n).unwrap();
            all[k - 1]
        }
    }
}
