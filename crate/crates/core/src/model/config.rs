use crate::annotation::CLASSES;

/// Everything that shapes the detector and its post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width of one view in pixels (the stacked input is as wide).
    pub view_width: usize,
    /// Height of one view; the stacked input is twice as tall.
    pub view_height: usize,
    /// Class names, background first.
    pub class_names: Vec<String>,
    pub priors_per_cell: usize,
    /// Multiplier on every channel count of the base net and extras.
    /// 1.0 is the full network.
    pub width_scale: f64,
    /// Prior scales for the first and last head; the rest are spaced linearly.
    pub min_scale: f64,
    pub max_scale: f64,
    pub aspect_ratios: Vec<f64>,
    /// (center, size) variances of the location encoding.
    pub variances: (f64, f64),
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub top_k: usize,
    pub match_iou_threshold: f64,
    pub neg_pos_ratio: f64,
    /// Weight of the (dx, dy) channels relative to the box channels in the
    /// regression loss.
    pub disparity_weight: f64,
}

impl ModelConfig {
    /// 640x320 views, stacked to 640x640.
    pub fn od_ssd_640() -> Self {
        ModelConfig {
            view_width: 640,
            view_height: 320,
            class_names: CLASSES.iter().map(|s| s.to_string()).collect(),
            priors_per_cell: 6,
            width_scale: 1.0,
            min_scale: 0.1,
            max_scale: 0.9,
            aspect_ratios: vec![2.0, 3.0],
            variances: (0.1, 0.2),
            score_threshold: 0.5,
            nms_iou_threshold: 0.45,
            top_k: 100,
            match_iou_threshold: 0.5,
            neg_pos_ratio: 3.0,
            disparity_weight: 1.0,
        }
    }

    /// 320x160 views, stacked to 320x320.
    pub fn od_ssd_320() -> Self {
        ModelConfig {
            view_width: 320,
            view_height: 160,
            ..Self::od_ssd_640()
        }
    }

    /// Desk-scale configuration: 160x80 views and half-width channels.
    pub fn toy() -> Self {
        ModelConfig {
            view_width: 160,
            view_height: 80,
            width_scale: 0.5,
            ..Self::od_ssd_640()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name).filter(|&i| i > 0)
    }

    /// (height, width) of the stacked network input.
    pub fn input_hw(&self) -> (usize, usize) {
        (2 * self.view_height, self.view_width)
    }

    /// Prior scale for head `k` of `num_heads`; `k == num_heads` extrapolates
    /// one step past the last head.
    pub fn scale(&self, k: usize, num_heads: usize) -> f64 {
        if num_heads <= 1 {
            return self.min_scale;
        }
        self.min_scale + (self.max_scale - self.min_scale) * k as f64 / (num_heads - 1) as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.view_width == 0 || self.view_height == 0 {
            return Err("view size must be positive".into());
        }
        if self.num_classes() < 2 {
            return Err("need background plus at least one class".into());
        }
        if self.priors_per_cell != 2 + 2 * self.aspect_ratios.len() {
            return Err(format!(
                "priors_per_cell {} does not match 2 squares + 2 per aspect ratio ({} ratios)",
                self.priors_per_cell,
                self.aspect_ratios.len()
            ));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 4.0) {
            return Err(format!("width_scale {} out of range", self.width_scale));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale) {
            return Err("prior scales must satisfy 0 < min <= max".into());
        }
        if self.variances.0 <= 0.0 || self.variances.1 <= 0.0 {
            return Err("variances must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let ratios: Vec<String> = self.aspect_ratios.iter().map(|r| r.to_string()).collect();
        format!(
            "view_width={}\nview_height={}\nclasses={}\npriors_per_cell={}\nwidth_scale={}\nmin_scale={}\nmax_scale={}\naspect_ratios={}\nvariances={},{}\nscore_threshold={}\nnms_iou_threshold={}\ntop_k={}\nmatch_iou_threshold={}\nneg_pos_ratio={}\ndisparity_weight={}\n",
            self.view_width,
            self.view_height,
            self.class_names.join(","),
            self.priors_per_cell,
            self.width_scale,
            self.min_scale,
            self.max_scale,
            ratios.join(","),
            self.variances.0,
            self.variances.1,
            self.score_threshold,
            self.nms_iou_threshold,
            self.top_k,
            self.match_iou_threshold,
            self.neg_pos_ratio,
            self.disparity_weight,
        )
    }

    /// Applies `key=value` lines over `self`. Unknown keys are errors.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), String> {
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {line:?}"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{k}: cannot parse {v:?}"))
        }
        match key {
            "view_width" => self.view_width = num(key, v)?,
            "view_height" => self.view_height = num(key, v)?,
            "classes" => self.class_names = v.split(',').map(|s| s.trim().to_string()).collect(),
            "priors_per_cell" => self.priors_per_cell = num(key, v)?,
            "width_scale" => self.width_scale = num(key, v)?,
            "min_scale" => self.min_scale = num(key, v)?,
            "max_scale" => self.max_scale = num(key, v)?,
            "aspect_ratios" => {
                self.aspect_ratios = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "variances" => {
                let (a, b) = v.split_once(',').ok_or("variances: expected center,size")?;
                self.variances = (num(key, a.trim())?, num(key, b.trim())?);
            }
            "score_threshold" => self.score_threshold = num(key, v)?,
            "nms_iou_threshold" => self.nms_iou_threshold = num(key, v)?,
            "top_k" => self.top_k = num(key, v)?,
            "match_iou_threshold" => self.match_iou_threshold = num(key, v)?,
            "neg_pos_ratio" => self.neg_pos_ratio = num(key, v)?,
            "disparity_weight" => self.disparity_weight = num(key, v)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }
}
