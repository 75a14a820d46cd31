from sqlalchemy import text

# csv exports, rows come out in insertion order so reruns give identical files
QUERY_SQL = {
    "ber": text(
        """
        select
            detector,
            snr_db,
            cast(errors as real) / bits as ber,
            errors,
            bits,
            trials,
            ci_low,
            ci_high,
            capped,
            config
        from ber_records
        where id > :first_id
        order by id
        """
    ),
    "train": text(
        """
        select
            variant,
            step,
            loss,
            learning_rate
        from train_steps
        where id > :first_id
        order by id
        """
    ),
    "complexity": text(
        """
        select
            n_t,
            n_r,
            d_model,
            n_layers,
            variant,
            sublayer,
            macs,
            symbolic
        from mac_counts
        where id > :first_id
        order by id
        """
    ),
}
