"""

Module to implement the image quality metrics used to compare super-resolved PET images with their references:
root-mean-square error, peak signal-to-noise ratio and structural similarity.

PSNR takes as peak the maximum of the ESTIMATE, not of the reference. This is unusual but it is how the published
comparison tables were computed; `peak='reference'` gives the conventional definition.

SSIM is computed from global statistics (one mean, variance and covariance over the whole image or mask), with
the usual stabilisers c1 = (0.01 L)^2 and c2 = (0.03 L)^2 and L = max(reference) unless given.

All metrics accept an optional boolean mask restricting the evaluation to a region (e.g. the head support).

"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Dict, List
import numpy as np
import pandas as pd
from sklearn.metrics import mean_squared_error as mse
from petsr.common import ShapeError, write_json, write_text
from petsr.volume import ImageGrid

logger = logging.getLogger(__name__)

METRICS = ('psnr', 'ssim', 'rmse')
K1, K2 = 0.01, 0.03


def _values(est: ImageGrid, ref: ImageGrid, mask: Optional[np.ndarray]):
    if est.data.shape != ref.data.shape:
        raise ShapeError(f"cannot compare images of dims {est.dims} and {ref.dims}")
    if mask is None:
        return est.data.ravel(), ref.data.ravel()
    mask = np.asarray(mask, dtype=bool).reshape(est.data.shape)
    if not mask.any():
        raise ValueError("evaluation mask selects no voxels")
    return est.data[mask], ref.data[mask]


def rmse(est: ImageGrid, ref: ImageGrid, mask: Optional[np.ndarray] = None) -> float:
    x, y = _values(est, ref, mask)
    return math.sqrt(mse(y, x))


def psnr(est: ImageGrid, ref: ImageGrid, mask: Optional[np.ndarray] = None, peak: str = 'estimate') -> float:
    """
    20 log10(peak / RMSE) in dB.

    Returns
    -------
    float
        math.inf when the estimate equals the reference (zero error)
    """
    x, y = _values(est, ref, mask)
    error = math.sqrt(mse(y, x))
    if error == 0:
        return math.inf
    if peak not in ('estimate', 'reference'):
        raise ValueError(f"peak must be 'estimate' or 'reference', got {peak}")
    top = float(x.max() if peak == 'estimate' else y.max())
    if top <= 0:
        return -math.inf
    return 20 * math.log10(top / error)


def ssim(est: ImageGrid, ref: ImageGrid, mask: Optional[np.ndarray] = None, dynamic_range: Optional[float] = None) -> float:
    x, y = _values(est, ref, mask)
    if dynamic_range is None:
        dynamic_range = float(y.max())
    if dynamic_range <= 0:
        dynamic_range = 1.0
    c1 = (K1 * dynamic_range) ** 2
    c2 = (K2 * dynamic_range) ** 2
    mu_x, mu_y = x.mean(), y.mean()
    var_x, var_y = x.var(), y.var()
    covariance = np.mean((x - mu_x) * (y - mu_y))
    value = ((2 * mu_x * mu_y + c1) * (2 * covariance + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(value)


def evaluate(est: ImageGrid, ref: ImageGrid, mask: Optional[np.ndarray] = None) -> Dict[str, float]:
    return {'psnr': psnr(est, ref, mask), 'ssim': ssim(est, ref, mask), 'rmse': rmse(est, ref, mask)}


def _json_number(value):
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
    return value


@dataclass
class MetricsReport:
    """
    Aggregated rows (one per method and reference, mean over validation subjects) plus the per-subject rows
    they come from.

    rows
    -----------------

      method  reference   psnr   ssim   rmse  status
    0     LR       true  21.30  0.912  0.410      ok
    1     S1       true  24.75  0.951  0.270      ok

    """
    rows: pd.DataFrame
    per_subject: pd.DataFrame = field(default_factory=pd.DataFrame)
    metadata: Dict = field(default_factory=dict)

    @classmethod
    def from_per_subject(cls, per_subject: List[Dict], metadata: Optional[Dict] = None) -> 'MetricsReport':
        """Rows need `method`, `reference`, `subject`, the metrics and a `status` of 'ok' or 'failed'"""
        columns = ['method', 'reference', 'subject', *METRICS, 'status']
        subjects = pd.DataFrame(per_subject, columns=columns)
        rows = []
        for (method, reference), group in subjects.groupby(['method', 'reference'], sort=False):
            failed = (group['status'] != 'ok').any()
            row = {'method': method, 'reference': reference, 'status': 'failed' if failed else 'ok'}
            for metric in METRICS:
                row[metric] = np.nan if failed else float(np.mean(group[metric].to_numpy(dtype=np.float64)))
            rows.append(row)
        return cls(pd.DataFrame(rows, columns=['method', 'reference', *METRICS, 'status']), subjects, dict(metadata or {}))

    def format_table(self, metrics=('psnr', 'ssim')) -> pd.DataFrame:
        """Metric | Reference | one column per method, in the order the methods were run"""
        methods = list(dict.fromkeys(self.rows['method']))
        long = self.rows.melt(id_vars=['method', 'reference'], value_vars=list(metrics), var_name='metric')
        long['metric'] = long['metric'].str.upper()
        table = long.pivot_table(index=['metric', 'reference'], columns='method', values='value', aggfunc='first', dropna=False)
        return table.reindex(columns=methods)

    def to_csv(self, path: str):
        logger.info('writing file %s', path)
        write_text(path, self.rows.to_csv(index=False, float_format='%.6f'))

    def to_dict(self) -> Dict:
        def records(frame):
            return [{k: _json_number(v) for k, v in r.items()} for r in frame.to_dict(orient='records')]
        return {'metadata': self.metadata, 'rows': records(self.rows), 'per_subject': records(self.per_subject)}

    def to_json(self, path: str):
        write_json(path, self.to_dict())
