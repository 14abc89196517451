from pathlib import Path

from surfels.images import write_pfm, write_png


def export_maps(maps, directory, stem):
    """
    Write one view's rendered maps.

    Colour and alpha mask go to 8-bit PNG; depth, normal and confidence to PFM.
    Returns the written paths keyed by map name.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    maps = maps.detach()
    paths = {
        'color': directory / f'{stem}_color.png',
        'alpha': directory / f'{stem}_mask.png',
        'depth': directory / f'{stem}_depth.pfm',
        'normal': directory / f'{stem}_normal.pfm',
        'confidence': directory / f'{stem}_confidence.pfm',
    }
    write_png(paths['color'], maps.color)
    write_png(paths['alpha'], maps.alpha)
    write_pfm(paths['depth'], maps.depth)
    write_pfm(paths['normal'], maps.normal)
    write_pfm(paths['confidence'], maps.confidence)
    return paths
