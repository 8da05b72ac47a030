""" Writes result tables to CSV files. """

from pathlib import Path
import pandas as pd


def write_table(df, fp, columns):
    """ Writes a result table to a CSV file, one row per setting, without the index.

    Arguments
    ---------
    df: pandas.DataFrame
        table whose columns must equal ``columns``
    fp: str or pathlib.Path
        Filepath to write
    columns: list[str]

    Returns
    -------
    None

    """
    if not df.columns.equals(pd.Index(columns)):
        raise ValueError(f"Table columns {list(df.columns)} do not match {columns}.")
    Path(fp).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(fp, index=False)
