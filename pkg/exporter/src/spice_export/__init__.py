from .export import ExportJob, ExportSummary, export, extract_frames, load_backbone, mean_pool
